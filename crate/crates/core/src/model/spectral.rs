//! Spectral encoder: wide-kernel stem convolution, a stack of strided
//! residual blocks, then a 1-tap convolution down to a single channel whose
//! flattened output is the embedding. The embedding length follows from the
//! convolution length arithmetic and is fixed at build time.

use crate::error::{Error, Result};
use crate::netprims::{
    relu, relu_backward, Conv1d, ConvInit, Grads, Padding, ParamStore, ResBlock, ResBlockCache,
    Tensor2,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct SpectralEncoder {
    stem: Conv1d,
    blocks: Vec<ResBlock>,
    reduce: Conv1d,
    pub in_channels: usize,
    pub in_len: usize,
    pub embed_len: usize,
}

#[derive(Debug, Clone)]
pub struct SpectralCache<F> {
    input: Tensor2<F>,
    stem_pre: Tensor2<F>,
    stem_out: Tensor2<F>,
    block_caches: Vec<ResBlockCache<F>>,
    block_out: Tensor2<F>,
}

impl SpectralEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        in_channels: usize,
        in_len: usize,
        hidden: usize,
        blocks: usize,
        stem_kernel: usize,
        block_kernel: usize,
        block_stride: usize,
        seed: u64,
    ) -> Result<Self> {
        let stem = Conv1d::init(
            store,
            &format!("{prefix}.stem"),
            in_channels,
            hidden,
            stem_kernel,
            1,
            Padding::Same,
            seed,
            ConvInit::He,
        )?;
        let mut len = in_len;
        let mut block_layers = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let block = ResBlock::init(
                store,
                &format!("{prefix}.block{b}"),
                hidden,
                block_kernel,
                block_stride,
                seed,
                ConvInit::He,
            )?;
            len = block.out_len(len)?;
            block_layers.push(block);
        }
        let reduce = Conv1d::init(
            store,
            &format!("{prefix}.reduce"),
            hidden,
            1,
            1,
            1,
            Padding::Same,
            seed,
            ConvInit::He,
        )?;
        if len == 0 {
            return Err(Error::InvalidConfig(format!(
                "{prefix}: convolution stack reduces length {in_len} to zero"
            )));
        }
        Ok(SpectralEncoder { stem, blocks: block_layers, reduce, in_channels, in_len, embed_len: len })
    }

    /// Recomputes the embedding length from the conv length formulas; equals
    /// `embed_len` by construction and is asserted in tests.
    pub fn expected_embed_len(&self) -> Result<usize> {
        let mut len = self.stem.out_len(self.in_len)?;
        for b in &self.blocks {
            len = b.out_len(len)?;
        }
        self.reduce.out_len(len)
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor2<F>,
    ) -> Result<(Vec<F>, SpectralCache<F>)> {
        if x.rows() != self.in_channels || x.cols() != self.in_len {
            return Err(Error::Shape(format!(
                "spectral encoder expects {}x{}, got {}x{}",
                self.in_channels,
                self.in_len,
                x.rows(),
                x.cols()
            )));
        }
        let stem_pre = self.stem.forward(store, x)?;
        let stem_out = relu(&stem_pre);
        let mut cur = stem_out.clone();
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(store, &cur)?;
            block_caches.push(cache);
            cur = next;
        }
        let reduced = self.reduce.forward(store, &cur)?;
        debug_assert_eq!(reduced.cols(), self.embed_len);
        let embedding = reduced.row(0).to_vec();
        Ok((
            embedding,
            SpectralCache { input: x.clone(), stem_pre, stem_out, block_caches, block_out: cur },
        ))
    }

    /// Backward from the embedding gradient into parameter gradients. The
    /// gradient w.r.t. the raw spectrum is discarded (inputs are data).
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        cache: &SpectralCache<F>,
        d_embed: &[F],
        grads: &mut Grads<F>,
    ) {
        let dy = Tensor2::from_vec(1, d_embed.len(), d_embed.to_vec()).expect("embedding shape");
        let mut d = self.reduce.backward(store, &cache.block_out, &dy, grads);
        for (block, bcache) in self.blocks.iter().zip(&cache.block_caches).rev() {
            d = block.backward(store, bcache, &d, grads);
        }
        let d_stem_pre = relu_backward(&cache.stem_pre, &d);
        let _ = self.stem.backward(store, &cache.input, &d_stem_pre, grads);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embed_len_follows_length_formulas() {
        // ceil-halving chain: 1201 → 601 → 301 → 151 → 76 → 38 → 19.
        let mut store: ParamStore<f64> = ParamStore::new();
        let enc =
            SpectralEncoder::init(&mut store, "uv", 2, 1201, 4, 6, 59, 17, 2, 0).unwrap();
        assert_eq!(enc.embed_len, 19);
        assert_eq!(enc.expected_embed_len().unwrap(), 19);

        let mut store: ParamStore<f64> = ParamStore::new();
        let enc =
            SpectralEncoder::init(&mut store, "ftir", 1, 6801, 4, 6, 59, 17, 2, 0).unwrap();
        // 6801 → 3401 → 1701 → 851 → 426 → 213 → 107.
        assert_eq!(enc.embed_len, 107);
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let enc = SpectralEncoder::init(&mut store, "e", 2, 64, 8, 2, 9, 5, 2, 3).unwrap();
        let x = Tensor2::from_vec(2, 64, (0..128).map(|i| (i as f64 * 0.37).sin()).collect())
            .unwrap();
        let (a, _) = enc.forward(&store, &x).unwrap();
        let (b, _) = enc.forward(&store, &x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), enc.embed_len);
        assert_eq!(enc.embed_len, 16);
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let enc = SpectralEncoder::init(&mut store, "e", 1, 64, 8, 2, 9, 5, 2, 3).unwrap();
        let x = Tensor2::zeros(1, 63);
        assert!(matches!(enc.forward(&store, &x), Err(Error::Shape(_))));
    }
}
