//! Dense affine layer on (rows × in_dim) inputs.

use super::params::{he_init, Grads, ParamId, ParamStore};
use super::tensor::Tensor2;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Linear {
    /// Weight matrix stored (in_dim × out_dim).
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let w = store.register(&wname, in_dim, out_dim, he_init(seed, &wname, in_dim, in_dim * out_dim))?;
        let b = store.register(&format!("{name}.bias"), 1, out_dim, vec![F::zero(); out_dim])?;
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn forward<F: Scalar>(&self, store: &ParamStore<F>, x: &Tensor2<F>) -> Result<Tensor2<F>> {
        if x.cols() != self.in_dim {
            return Err(Error::Shape(format!(
                "linear expects {} inputs, got {}",
                self.in_dim,
                x.cols()
            )));
        }
        let w = store.value(self.w);
        let b = store.value(self.b);
        let mut y = Tensor2::zeros(x.rows(), self.out_dim);
        for r in 0..x.rows() {
            let xr = x.row(r);
            let yr = y.row_mut(r);
            yr.copy_from_slice(b);
            for (i, &xi) in xr.iter().enumerate() {
                if xi == F::zero() {
                    continue;
                }
                let wrow = &w[i * self.out_dim..(i + 1) * self.out_dim];
                for (yv, &wv) in yr.iter_mut().zip(wrow) {
                    *yv += xi * wv;
                }
            }
        }
        Ok(y)
    }

    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor2<F>,
        dy: &Tensor2<F>,
        grads: &mut Grads<F>,
    ) -> Tensor2<F> {
        let w = store.value(self.w);
        let mut dx = Tensor2::zeros(x.rows(), self.in_dim);
        for r in 0..x.rows() {
            let xr = x.row(r);
            let dyr = dy.row(r);
            {
                let db = grads.seg_mut(self.b);
                for (g, &d) in db.iter_mut().zip(dyr) {
                    *g += d;
                }
            }
            let dw = grads.seg_mut(self.w);
            let dxr = dx.row_mut(r);
            for i in 0..self.in_dim {
                let wrow = &w[i * self.out_dim..(i + 1) * self.out_dim];
                let dwrow = &mut dw[i * self.out_dim..(i + 1) * self.out_dim];
                let xi = xr[i];
                let mut acc = F::zero();
                for ((&d, &wv), g) in dyr.iter().zip(wrow).zip(dwrow) {
                    acc += d * wv;
                    *g += d * xi;
                }
                dxr[i] = acc;
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_matches_manual_affine() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let lin = Linear::init(&mut store, "fc", 2, 3, 0).unwrap();
        store.value_mut(lin.w).copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        store.value_mut(lin.b).copy_from_slice(&[0.1, 0.2, 0.3]);
        let x = Tensor2::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let y = lin.forward(&store, &x).unwrap();
        assert_eq!(y.row(0), &[1.0 - 4.0 + 0.1, 2.0 - 5.0 + 0.2, 3.0 - 6.0 + 0.3]);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let lin = Linear::init(&mut store, "fc", 2, 3, 0).unwrap();
        let x = Tensor2::zeros(1, 4);
        assert!(matches!(lin.forward(&store, &x), Err(Error::Shape(_))));
    }
}
