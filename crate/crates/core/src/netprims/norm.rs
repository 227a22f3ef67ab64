//! Batch normalization over the feature axis of a (batch × features) tensor.

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::Tensor2;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct BatchNorm<F> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    /// Fraction of the batch statistic blended into the running statistic on
    /// each training step.
    pub momentum: F,
    pub eps: F,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct BnCache<F> {
    xhat: Tensor2<F>,
    inv_std: Vec<F>,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn init(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.register(&format!("{name}.gamma"), 1, dim, vec![F::one(); dim])?;
        let beta = store.register(&format!("{name}.beta"), 1, dim, vec![F::zero(); dim])?;
        Ok(BatchNorm {
            gamma,
            beta,
            dim,
            momentum: F::of(0.1),
            eps: F::of(1e-5),
            running_mean: vec![F::zero(); dim],
            running_var: vec![F::one(); dim],
        })
    }

    fn check_dim(&self, x: &Tensor2<F>) -> Result<()> {
        if x.cols() != self.dim {
            return Err(Error::Shape(format!(
                "batch norm over {} features, got {}",
                self.dim,
                x.cols()
            )));
        }
        Ok(())
    }

    /// Training-mode forward: normalizes with batch statistics (biased
    /// variance) and updates the running statistics.
    pub fn forward_train(
        &mut self,
        store: &ParamStore<F>,
        x: &Tensor2<F>,
    ) -> Result<(Tensor2<F>, BnCache<F>)> {
        self.check_dim(x)?;
        let b = x.rows();
        if b < 2 {
            return Err(Error::InvalidBatch(format!(
                "batch norm in train mode needs batch ≥ 2, got {b}"
            )));
        }
        let n = F::of(b as f64);
        let gamma = store.value(self.gamma);
        let beta = store.value(self.beta);

        let mut mean = vec![F::zero(); self.dim];
        for r in 0..b {
            for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);

        let mut var = vec![F::zero(); self.dim];
        for r in 0..b {
            for ((vv, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                let d = v - m;
                *vv += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n);

        let inv_std: Vec<F> = var.iter().map(|&v| (v + self.eps).sqrt().recip()).collect();

        let mut xhat = Tensor2::zeros(b, self.dim);
        let mut y = Tensor2::zeros(b, self.dim);
        for r in 0..b {
            let xr = x.row(r);
            let hr = xhat.row_mut(r);
            for c in 0..self.dim {
                hr[c] = (xr[c] - mean[c]) * inv_std[c];
            }
            let yr = y.row_mut(r);
            for c in 0..self.dim {
                yr[c] = gamma[c] * xhat.get(r, c) + beta[c];
            }
        }

        let one = F::one();
        for c in 0..self.dim {
            self.running_mean[c] = (one - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
            self.running_var[c] = (one - self.momentum) * self.running_var[c] + self.momentum * var[c];
        }

        Ok((y, BnCache { xhat, inv_std }))
    }

    /// Eval-mode forward: a deterministic affine map using running
    /// statistics. Works for any batch size, including 1.
    pub fn forward_eval(&self, store: &ParamStore<F>, x: &Tensor2<F>) -> Result<Tensor2<F>> {
        self.check_dim(x)?;
        let gamma = store.value(self.gamma);
        let beta = store.value(self.beta);
        let mut y = Tensor2::zeros(x.rows(), self.dim);
        for r in 0..x.rows() {
            let xr = x.row(r);
            let yr = y.row_mut(r);
            for c in 0..self.dim {
                let inv = (self.running_var[c] + self.eps).sqrt().recip();
                yr[c] = gamma[c] * (xr[c] - self.running_mean[c]) * inv + beta[c];
            }
        }
        Ok(y)
    }

    pub fn backward_train(
        &self,
        store: &ParamStore<F>,
        cache: &BnCache<F>,
        dy: &Tensor2<F>,
        grads: &mut Grads<F>,
    ) -> Tensor2<F> {
        let b = dy.rows();
        let n = F::of(b as f64);
        let gamma = store.value(self.gamma);

        let mut sum_dy = vec![F::zero(); self.dim];
        let mut sum_dy_xhat = vec![F::zero(); self.dim];
        for r in 0..b {
            let dr = dy.row(r);
            let hr = cache.xhat.row(r);
            for c in 0..self.dim {
                sum_dy[c] += dr[c];
                sum_dy_xhat[c] += dr[c] * hr[c];
            }
        }

        {
            let dgamma = grads.seg_mut(self.gamma);
            for (g, &s) in dgamma.iter_mut().zip(&sum_dy_xhat) {
                *g += s;
            }
        }
        {
            let dbeta = grads.seg_mut(self.beta);
            for (g, &s) in dbeta.iter_mut().zip(&sum_dy) {
                *g += s;
            }
        }

        let mut dx = Tensor2::zeros(b, self.dim);
        for r in 0..b {
            let dr = dy.row(r);
            let hr = cache.xhat.row(r);
            let dxr = dx.row_mut(r);
            for c in 0..self.dim {
                let term = n * dr[c] - sum_dy[c] - hr[c] * sum_dy_xhat[c];
                dxr[c] = gamma[c] * cache.inv_std[c] * term / n;
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_normalizes_to_zero() {
        // Variance floor applies; with gamma=1, beta=0 the output is zero.
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut bn = BatchNorm::init(&mut store, "bn", 3).unwrap();
        let x = Tensor2::from_rows(&[vec![2.0, -1.0, 5.0], vec![2.0, -1.0, 5.0]]).unwrap();
        let (y, _) = bn.forward_train(&store, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0), "{:?}", y.data());
    }

    #[test]
    fn train_mode_standardizes_features() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut bn = BatchNorm::init(&mut store, "bn", 1).unwrap();
        let x = Tensor2::from_rows(&[vec![1.0], vec![3.0], vec![5.0], vec![7.0]]).unwrap();
        let (y, _) = bn.forward_train(&store, &x).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4); // eps floor shifts variance slightly
    }

    #[test]
    fn batch_of_one_is_invalid_in_train_mode() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut bn = BatchNorm::init(&mut store, "bn", 2).unwrap();
        let x = Tensor2::zeros(1, 2);
        assert!(matches!(
            bn.forward_train(&store, &x),
            Err(Error::InvalidBatch(_))
        ));
    }

    #[test]
    fn eval_mode_is_deterministic_affine() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut bn = BatchNorm::init(&mut store, "bn", 2).unwrap();
        bn.running_mean = vec![1.0, -1.0];
        bn.running_var = vec![4.0, 0.25];
        let x = Tensor2::from_rows(&[vec![3.0, 0.0]]).unwrap();
        let y1 = bn.forward_eval(&store, &x).unwrap();
        let y2 = bn.forward_eval(&store, &x).unwrap();
        assert_eq!(y1, y2);
        let inv0 = (4.0f64 + 1e-5).sqrt().recip();
        assert!((y1.get(0, 0) - 2.0 * inv0).abs() < 1e-12);
    }
}
