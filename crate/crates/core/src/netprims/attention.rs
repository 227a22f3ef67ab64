//! Multi-head softmax attention, used in two roles: intrasample attention
//! over one sample's feature tokens, and intersample attention across the
//! samples of a batch (each sample flattened to one row, no positional
//! encoding on the sample axis, so outputs are invariant to permuting the
//! other samples).

use super::linear::Linear;
use super::loss::softmax;
use super::params::{Grads, ParamStore};
use super::tensor::Tensor2;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub dim: usize,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct MhaCache<F> {
    x: Tensor2<F>,
    q: Tensor2<F>,
    k: Tensor2<F>,
    v: Tensor2<F>,
    /// Per-head attention weights, rows = queries.
    attn: Vec<Tensor2<F>>,
    concat: Tensor2<F>,
}

fn head_cols<F: Scalar>(x: &Tensor2<F>, h: usize, dh: usize) -> Tensor2<F> {
    let mut out = Tensor2::zeros(x.rows(), dh);
    for r in 0..x.rows() {
        out.row_mut(r).copy_from_slice(&x.row(r)[h * dh..(h + 1) * dh]);
    }
    out
}

fn set_head_cols<F: Scalar>(dst: &mut Tensor2<F>, src: &Tensor2<F>, h: usize, dh: usize) {
    for r in 0..src.rows() {
        dst.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(src.row(r));
    }
}

/// a (m×k) · b (k×n)
fn matmul<F: Scalar>(a: &Tensor2<F>, b: &Tensor2<F>) -> Tensor2<F> {
    debug_assert_eq!(a.cols(), b.rows());
    let mut out = Tensor2::zeros(a.rows(), b.cols());
    for r in 0..a.rows() {
        let ar = a.row(r);
        let or = out.row_mut(r);
        for (i, &av) in ar.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            for (ov, &bv) in or.iter_mut().zip(b.row(i)) {
                *ov += av * bv;
            }
        }
    }
    out
}

/// a (m×k) · bᵀ (n×k)
fn matmul_bt<F: Scalar>(a: &Tensor2<F>, b: &Tensor2<F>) -> Tensor2<F> {
    debug_assert_eq!(a.cols(), b.cols());
    let mut out = Tensor2::zeros(a.rows(), b.rows());
    for r in 0..a.rows() {
        let ar = a.row(r);
        let or = out.row_mut(r);
        for (c, ov) in or.iter_mut().enumerate() {
            let mut acc = F::zero();
            for (&x, &y) in ar.iter().zip(b.row(c)) {
                acc += x * y;
            }
            *ov = acc;
        }
    }
    out
}

/// aᵀ (k×m) · b (k×n)
fn matmul_at<F: Scalar>(a: &Tensor2<F>, b: &Tensor2<F>) -> Tensor2<F> {
    debug_assert_eq!(a.rows(), b.rows());
    let mut out = Tensor2::zeros(a.cols(), b.cols());
    for i in 0..a.rows() {
        let ar = a.row(i);
        let br = b.row(i);
        for (r, &av) in ar.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let or = out.row_mut(r);
            for (ov, &bv) in or.iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    }
    out
}

impl MultiHeadAttention {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        seed: u64,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embedding dim {dim} must be divisible by head count {heads}"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::init(store, &format!("{name}.q"), dim, dim, seed)?,
            k: Linear::init(store, &format!("{name}.k"), dim, dim, seed)?,
            v: Linear::init(store, &format!("{name}.v"), dim, dim, seed)?,
            o: Linear::init(store, &format!("{name}.o"), dim, dim, seed)?,
            dim,
            heads,
        })
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor2<F>,
    ) -> Result<(Tensor2<F>, MhaCache<F>)> {
        if x.cols() != self.dim {
            return Err(Error::Shape(format!(
                "attention expects dim {}, got {}",
                self.dim,
                x.cols()
            )));
        }
        let q = self.q.forward(store, x)?;
        let k = self.k.forward(store, x)?;
        let v = self.v.forward(store, x)?;
        let dh = self.dim / self.heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());

        let mut concat = Tensor2::zeros(x.rows(), self.dim);
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = head_cols(&q, h, dh);
            let kh = head_cols(&k, h, dh);
            let vh = head_cols(&v, h, dh);
            let mut scores = matmul_bt(&qh, &kh);
            scores.data_mut().iter_mut().for_each(|s| *s *= scale);
            let mut a = Tensor2::zeros(scores.rows(), scores.cols());
            for r in 0..scores.rows() {
                let sm = softmax(scores.row(r));
                a.row_mut(r).copy_from_slice(&sm);
            }
            let oh = matmul(&a, &vh);
            set_head_cols(&mut concat, &oh, h, dh);
            attn.push(a);
        }
        let y = self.o.forward(store, &concat)?;
        Ok((y, MhaCache { x: x.clone(), q, k, v, attn, concat }))
    }

    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        cache: &MhaCache<F>,
        dy: &Tensor2<F>,
        grads: &mut Grads<F>,
    ) -> Tensor2<F> {
        let dh = self.dim / self.heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());

        let dconcat = self.o.backward(store, &cache.concat, dy, grads);
        let mut dq = Tensor2::zeros(cache.q.rows(), self.dim);
        let mut dk = Tensor2::zeros(cache.k.rows(), self.dim);
        let mut dv = Tensor2::zeros(cache.v.rows(), self.dim);

        for h in 0..self.heads {
            let doh = head_cols(&dconcat, h, dh);
            let qh = head_cols(&cache.q, h, dh);
            let kh = head_cols(&cache.k, h, dh);
            let vh = head_cols(&cache.v, h, dh);
            let a = &cache.attn[h];

            let da = matmul_bt(&doh, &vh);
            let dvh = matmul_at(a, &doh);

            // Softmax jacobian per query row.
            let mut ds = Tensor2::zeros(a.rows(), a.cols());
            for r in 0..a.rows() {
                let arow = a.row(r);
                let darow = da.row(r);
                let mut inner = F::zero();
                for (&av, &dav) in arow.iter().zip(darow) {
                    inner += av * dav;
                }
                let dsrow = ds.row_mut(r);
                for ((d, &av), &dav) in dsrow.iter_mut().zip(arow).zip(darow) {
                    *d = av * (dav - inner) * scale;
                }
            }

            let dqh = matmul(&ds, &kh);
            let dkh = matmul_at(&ds, &qh);
            set_head_cols(&mut dq, &dqh, h, dh);
            set_head_cols(&mut dk, &dkh, h, dh);
            set_head_cols(&mut dv, &dvh, h, dh);
        }

        let mut dx = self.q.backward(store, &cache.x, &dq, grads);
        let dxk = self.k.backward(store, &cache.x, &dk, grads);
        let dxv = self.v.backward(store, &cache.x, &dv, grads);
        for ((a, &b), &c) in dx.data_mut().iter_mut().zip(dxk.data()).zip(dxv.data()) {
            *a += b + c;
        }
        dx
    }
}

/// Self-attention over one sample's feature tokens (rows = tokens).
pub fn self_attention_intrasample<F: Scalar>(
    mha: &MultiHeadAttention,
    store: &ParamStore<F>,
    tokens: &Tensor2<F>,
) -> Result<(Tensor2<F>, MhaCache<F>)> {
    mha.forward(store, tokens)
}

/// Attention across samples: each sample's token grid is flattened to one
/// row, attention runs over the sample axis, and rows are reshaped back.
pub fn attention_intersample<F: Scalar>(
    mha: &MultiHeadAttention,
    store: &ParamStore<F>,
    samples: &[Tensor2<F>],
) -> Result<(Vec<Tensor2<F>>, MhaCache<F>)> {
    let (flat, tokens, dim) = flatten_samples(mha, samples)?;
    let (y, cache) = mha.forward(store, &flat)?;
    let outs = (0..samples.len())
        .map(|s| Tensor2::from_vec(tokens, dim, y.row(s).to_vec()).expect("shape"))
        .collect();
    Ok((outs, cache))
}

pub fn attention_intersample_backward<F: Scalar>(
    mha: &MultiHeadAttention,
    store: &ParamStore<F>,
    cache: &MhaCache<F>,
    d_samples: &[Tensor2<F>],
    grads: &mut Grads<F>,
) -> Vec<Tensor2<F>> {
    let tokens = d_samples[0].rows();
    let dim = d_samples[0].cols();
    let dy = Tensor2::from_rows(
        &d_samples.iter().map(|t| t.data().to_vec()).collect::<Vec<_>>(),
    )
    .expect("uniform sample shapes");
    let dx = mha.backward(store, cache, &dy, grads);
    (0..d_samples.len())
        .map(|s| Tensor2::from_vec(tokens, dim, dx.row(s).to_vec()).expect("shape"))
        .collect()
}

fn flatten_samples<F: Scalar>(
    mha: &MultiHeadAttention,
    samples: &[Tensor2<F>],
) -> Result<(Tensor2<F>, usize, usize)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Shape("intersample attention needs at least one sample".into()))?;
    let (tokens, dim) = (first.rows(), first.cols());
    if samples.iter().any(|s| s.rows() != tokens || s.cols() != dim) {
        return Err(Error::Shape("intersample samples must share one shape".into()));
    }
    if tokens * dim != mha.dim {
        return Err(Error::Shape(format!(
            "flattened sample dim {} does not match attention dim {}",
            tokens * dim,
            mha.dim
        )));
    }
    let flat =
        Tensor2::from_rows(&samples.iter().map(|t| t.data().to_vec()).collect::<Vec<_>>())?;
    Ok((flat, tokens, dim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;
    use rand::Rng;

    fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor2<f64> {
        let mut rng = rng_for(seed, "attn-test", 0);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor2::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn single_row_is_fixed_transform() {
        // With one token the attention weight is 1, so y = Wo(Wv x + bv) + bo.
        let mut store: ParamStore<f64> = ParamStore::new();
        let mha = MultiHeadAttention::init(&mut store, "a", 6, 2, 3).unwrap();
        let x = random_tensor(1, 6, 1);
        let (y, _) = mha.forward(&store, &x).unwrap();
        let v = mha.v.forward(&store, &x).unwrap();
        let want = mha.o.forward(&store, &v).unwrap();
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn row_output_invariant_to_permuting_other_rows() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mha = MultiHeadAttention::init(&mut store, "a", 8, 2, 5).unwrap();
        let x = random_tensor(6, 8, 2);
        let (y, _) = mha.forward(&store, &x).unwrap();

        // Swap rows 2 and 4; row 0's output must not change beyond fp noise.
        let mut rows: Vec<Vec<f64>> = (0..6).map(|r| x.row(r).to_vec()).collect();
        rows.swap(2, 4);
        let xp = Tensor2::from_rows(&rows).unwrap();
        let (yp, _) = mha.forward(&store, &xp).unwrap();
        for (a, b) in y.row(0).iter().zip(yp.row(0)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn intersample_round_trips_shapes() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mha = MultiHeadAttention::init(&mut store, "a", 12, 2, 5).unwrap();
        let samples: Vec<Tensor2<f64>> = (0..4).map(|i| random_tensor(3, 4, 10 + i)).collect();
        let (outs, _) = attention_intersample(&mha, &store, &samples).unwrap();
        assert_eq!(outs.len(), 4);
        assert_eq!(outs[0].rows(), 3);
        assert_eq!(outs[0].cols(), 4);
    }

    #[test]
    fn head_divisibility_enforced() {
        let mut store: ParamStore<f64> = ParamStore::new();
        assert!(MultiHeadAttention::init(&mut store, "a", 7, 2, 0).is_err());
    }
}
