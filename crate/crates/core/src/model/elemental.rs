//! Elemental (tabular) encoder with per-feature tokenization, intrasample
//! attention over feature tokens and intersample attention across a
//! reference batch plus the query row.
//!
//! Concentrations enter on a log scale (ln(1+ppm)); each feature carries an
//! optional presence flag so the encoder can tell true zeros from
//! mean-substituted entries. The query row is always the last sample; because
//! intersample attention carries no sample-axis positions, the output is
//! invariant to permuting the reference rows.

use crate::error::{Error, Result};
use crate::netprims::{
    relu, relu_backward, Grads, Linear, MhaCache, MultiHeadAttention, ParamStore, Tensor2,
};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// One tabular row for the encoder: raw concentrations plus presence flags,
/// in the fixed manifest order of the allowed elemental sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementalRow {
    pub values: Vec<f64>,
    pub flags: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Ffn {
    a: Linear,
    b: Linear,
}

#[derive(Debug, Clone)]
struct FfnCache<F> {
    x: Tensor2<F>,
    pre: Tensor2<F>,
    hidden: Tensor2<F>,
}

impl Ffn {
    fn init<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize, seed: u64) -> Result<Self> {
        Ok(Ffn {
            a: Linear::init(store, &format!("{name}.a"), dim, 2 * dim, seed)?,
            b: Linear::init(store, &format!("{name}.b"), 2 * dim, dim, seed)?,
        })
    }

    fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor2<F>,
    ) -> Result<(Tensor2<F>, FfnCache<F>)> {
        let pre = self.a.forward(store, x)?;
        let hidden = relu(&pre);
        let y = self.b.forward(store, &hidden)?;
        Ok((y, FfnCache { x: x.clone(), pre, hidden }))
    }

    fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        cache: &FfnCache<F>,
        dy: &Tensor2<F>,
        grads: &mut Grads<F>,
    ) -> Tensor2<F> {
        let dhidden = self.b.backward(store, &cache.hidden, dy, grads);
        let dpre = relu_backward(&cache.pre, &dhidden);
        self.a.backward(store, &cache.x, &dpre, grads)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    intra: MultiHeadAttention,
    intra_ffn: Ffn,
    inter: MultiHeadAttention,
    inter_ffn: Ffn,
}

#[derive(Debug, Clone)]
struct StageCache<F> {
    intra: Vec<(MhaCache<F>, FfnCache<F>)>,
    inter_mha: MhaCache<F>,
    inter_ffn: FfnCache<F>,
    flat_rows: usize,
}

#[derive(Debug, Clone)]
pub struct ElementalEncoder {
    tokenizer_w: crate::netprims::ParamId,
    tokenizer_b: crate::netprims::ParamId,
    stages: Vec<Stage>,
    pool: Linear,
    pub n_features: usize,
    pub token_dim: usize,
    pub embed_len: usize,
    pub use_flags: bool,
}

#[derive(Debug, Clone)]
pub struct ElementalCache<F> {
    token_inputs: Vec<Tensor2<F>>,
    stage_caches: Vec<StageCache<F>>,
    pool_input: Tensor2<F>,
    samples: usize,
}

impl ElementalEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        n_features: usize,
        token_dim: usize,
        embed_len: usize,
        intra_heads: usize,
        inter_heads: usize,
        stages: usize,
        use_flags: bool,
        seed: u64,
    ) -> Result<Self> {
        let in_per_feat = if use_flags { 2 } else { 1 };
        let wname = format!("{prefix}.tokenizer.weight");
        let tokenizer_w = store.register(
            &wname,
            n_features,
            in_per_feat * token_dim,
            crate::netprims::params::normal_init(seed, &wname, 0.5, n_features * in_per_feat * token_dim),
        )?;
        let tokenizer_b = store.register(
            &format!("{prefix}.tokenizer.bias"),
            n_features,
            token_dim,
            vec![F::zero(); n_features * token_dim],
        )?;
        let flat_dim = n_features * token_dim;
        let mut stage_layers = Vec::with_capacity(stages);
        for s in 0..stages {
            stage_layers.push(Stage {
                intra: MultiHeadAttention::init(
                    store,
                    &format!("{prefix}.stage{s}.intra"),
                    token_dim,
                    intra_heads,
                    seed,
                )?,
                intra_ffn: Ffn::init(store, &format!("{prefix}.stage{s}.intra_ffn"), token_dim, seed)?,
                inter: MultiHeadAttention::init(
                    store,
                    &format!("{prefix}.stage{s}.inter"),
                    flat_dim,
                    inter_heads,
                    seed,
                )?,
                inter_ffn: Ffn::init(store, &format!("{prefix}.stage{s}.inter_ffn"), flat_dim, seed)?,
            });
        }
        let pool = Linear::init(store, &format!("{prefix}.pool"), token_dim, embed_len, seed)?;
        Ok(ElementalEncoder {
            tokenizer_w,
            tokenizer_b,
            stages: stage_layers,
            pool,
            n_features,
            token_dim,
            embed_len,
            use_flags,
        })
    }

    fn check_row(&self, row: &ElementalRow) -> Result<()> {
        if row.values.len() != self.n_features || row.flags.len() != self.n_features {
            return Err(Error::Shape(format!(
                "elemental row needs {} entries, got {}",
                self.n_features,
                row.values.len()
            )));
        }
        Ok(())
    }

    /// Per-feature token inputs: [ln(1+value), flag] (flag column only when
    /// enabled).
    fn token_inputs<F: Scalar>(&self, row: &ElementalRow) -> Tensor2<F> {
        let in_per = if self.use_flags { 2 } else { 1 };
        let mut t = Tensor2::zeros(self.n_features, in_per);
        for f in 0..self.n_features {
            t.set(f, 0, F::of(row.values[f].ln_1p()));
            if self.use_flags {
                t.set(f, 1, F::of(row.flags[f]));
            }
        }
        t
    }

    fn tokenize<F: Scalar>(&self, store: &ParamStore<F>, inputs: &Tensor2<F>) -> Tensor2<F> {
        let w = store.value(self.tokenizer_w);
        let b = store.value(self.tokenizer_b);
        let in_per = inputs.cols();
        let d = self.token_dim;
        let mut tokens = Tensor2::zeros(self.n_features, d);
        for f in 0..self.n_features {
            let trow = tokens.row_mut(f);
            trow.copy_from_slice(&b[f * d..(f + 1) * d]);
            for k in 0..in_per {
                let xv = inputs.get(f, k);
                if xv == F::zero() {
                    continue;
                }
                let wrow = &w[f * in_per * d + k * d..f * in_per * d + (k + 1) * d];
                for (t, &wv) in trow.iter_mut().zip(wrow) {
                    *t += xv * wv;
                }
            }
        }
        tokens
    }

    fn tokenize_backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        inputs: &Tensor2<F>,
        d_tokens: &Tensor2<F>,
        grads: &mut Grads<F>,
    ) {
        let _ = store;
        let in_per = inputs.cols();
        let d = self.token_dim;
        for f in 0..self.n_features {
            let drow = d_tokens.row(f);
            {
                let db = grads.seg_mut(self.tokenizer_b);
                for (g, &dv) in db[f * d..(f + 1) * d].iter_mut().zip(drow) {
                    *g += dv;
                }
            }
            let dw = grads.seg_mut(self.tokenizer_w);
            for k in 0..in_per {
                let xv = inputs.get(f, k);
                if xv == F::zero() {
                    continue;
                }
                let dwrow = &mut dw[f * in_per * d + k * d..f * in_per * d + (k + 1) * d];
                for (g, &dv) in dwrow.iter_mut().zip(drow) {
                    *g += dv * xv;
                }
            }
        }
    }

    /// Encodes the query row in the context of the reference rows. The query
    /// is appended after the references; its first token, projected, is the
    /// embedding.
    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        query: &ElementalRow,
        references: &[ElementalRow],
    ) -> Result<(Vec<F>, ElementalCache<F>)> {
        if references.is_empty() {
            return Err(Error::InvalidConfig(
                "elemental encoder needs a non-empty reference set".into(),
            ));
        }
        self.check_row(query)?;
        for r in references {
            self.check_row(r)?;
        }
        let samples = references.len() + 1;
        let token_inputs: Vec<Tensor2<F>> = references
            .iter()
            .chain(std::iter::once(query))
            .map(|row| self.token_inputs(row))
            .collect();
        let mut sample_tokens: Vec<Tensor2<F>> =
            token_inputs.iter().map(|t| self.tokenize(store, t)).collect();

        let flat_dim = self.n_features * self.token_dim;
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            // Intrasample attention + feed-forward per sample, residual adds.
            let mut intra_caches = Vec::with_capacity(samples);
            for tokens in sample_tokens.iter_mut() {
                let (att, att_cache) = stage.intra.forward(store, tokens)?;
                add_into(tokens, &att);
                let (ff, ff_cache) = stage.intra_ffn.forward(store, tokens)?;
                add_into(tokens, &ff);
                intra_caches.push((att_cache, ff_cache));
            }
            // Intersample attention on flattened samples.
            let mut flat = Tensor2::zeros(samples, flat_dim);
            for (s, tokens) in sample_tokens.iter().enumerate() {
                flat.row_mut(s).copy_from_slice(tokens.data());
            }
            let (att, inter_mha) = stage.inter.forward(store, &flat)?;
            add_into(&mut flat, &att);
            let (ff, inter_ffn) = stage.inter_ffn.forward(store, &flat)?;
            add_into(&mut flat, &ff);
            for (s, tokens) in sample_tokens.iter_mut().enumerate() {
                tokens.data_mut().copy_from_slice(flat.row(s));
            }
            stage_caches.push(StageCache { intra: intra_caches, inter_mha, inter_ffn, flat_rows: samples });
        }

        let query_tokens = &sample_tokens[samples - 1];
        let pool_input =
            Tensor2::from_vec(1, self.token_dim, query_tokens.row(0).to_vec()).expect("token row");
        let out = self.pool.forward(store, &pool_input)?;
        debug_assert_eq!(out.cols(), self.embed_len);
        Ok((
            out.row(0).to_vec(),
            ElementalCache { token_inputs, stage_caches, pool_input, samples },
        ))
    }

    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        cache: &ElementalCache<F>,
        d_embed: &[F],
        grads: &mut Grads<F>,
    ) {
        let samples = cache.samples;
        let flat_dim = self.n_features * self.token_dim;
        let dy = Tensor2::from_vec(1, d_embed.len(), d_embed.to_vec()).expect("embedding shape");
        let d_pool_in = self.pool.backward(store, &cache.pool_input, &dy, grads);

        // Gradient w.r.t. each sample's token grid; only the query's first
        // token receives the pooled gradient initially.
        let mut d_tokens: Vec<Tensor2<F>> =
            (0..samples).map(|_| Tensor2::zeros(self.n_features, self.token_dim)).collect();
        d_tokens[samples - 1].row_mut(0).copy_from_slice(d_pool_in.row(0));

        for (stage, scache) in self.stages.iter().zip(&cache.stage_caches).rev() {
            // Undo the intersample part (residual: dx = dy + f'(x)ᵀ dy).
            let mut d_flat = Tensor2::zeros(scache.flat_rows, flat_dim);
            for (s, dt) in d_tokens.iter().enumerate() {
                d_flat.row_mut(s).copy_from_slice(dt.data());
            }
            let d_ffn_in = stage.inter_ffn.backward(store, &scache.inter_ffn, &d_flat, grads);
            add_into(&mut d_flat, &d_ffn_in);
            let d_att_in = stage.inter.backward(store, &scache.inter_mha, &d_flat, grads);
            add_into(&mut d_flat, &d_att_in);
            for (s, dt) in d_tokens.iter_mut().enumerate() {
                dt.data_mut().copy_from_slice(d_flat.row(s));
            }
            // Undo the intrasample part per sample.
            for (s, dt) in d_tokens.iter_mut().enumerate() {
                let (att_cache, ff_cache) = &scache.intra[s];
                let d_ffn_in = stage.intra_ffn.backward(store, ff_cache, dt, grads);
                add_into(dt, &d_ffn_in);
                let d_att_in = stage.intra.backward(store, att_cache, dt, grads);
                add_into(dt, &d_att_in);
            }
        }

        for (inputs, dt) in cache.token_inputs.iter().zip(&d_tokens) {
            self.tokenize_backward(store, inputs, dt, grads);
        }
    }
}

fn add_into<F: Scalar>(dst: &mut Tensor2<F>, src: &Tensor2<F>) {
    for (a, &b) in dst.data_mut().iter_mut().zip(src.data()) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;
    use rand::Rng;

    fn encoder(store: &mut ParamStore<f64>) -> ElementalEncoder {
        ElementalEncoder::init(store, "elem", 6, 4, 8, 2, 2, 1, true, 5).unwrap()
    }

    fn row(seed: u64, n: usize) -> ElementalRow {
        let mut rng = rng_for(seed, "elem-row", 0);
        ElementalRow {
            values: (0..n).map(|_| rng.gen_range(0.0..500.0)).collect(),
            flags: vec![1.0; n],
        }
    }

    #[test]
    fn output_length_and_determinism() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let enc = encoder(&mut store);
        let refs: Vec<ElementalRow> = (0..3).map(|i| row(i, 6)).collect();
        let q = row(9, 6);
        let (a, _) = enc.forward(&store, &q, &refs).unwrap();
        let (b, _) = enc.forward(&store, &q, &refs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
    }

    #[test]
    fn reference_permutation_leaves_output_unchanged() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let enc = encoder(&mut store);
        let refs: Vec<ElementalRow> = (0..5).map(|i| row(i, 6)).collect();
        let q = row(11, 6);
        let (base, _) = enc.forward(&store, &q, &refs).unwrap();
        let mut permuted = refs.clone();
        permuted.swap(0, 4);
        permuted.swap(1, 3);
        let (out, _) = enc.forward(&store, &q, &permuted).unwrap();
        let max_abs = base
            .iter()
            .zip(&out)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_abs < 1e-5, "max abs diff {max_abs}");
    }

    #[test]
    fn empty_references_are_invalid() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let enc = encoder(&mut store);
        let q = row(1, 6);
        assert!(matches!(
            enc.forward(&store, &q, &[]),
            Err(Error::InvalidConfig(_))
        ));
    }
}
