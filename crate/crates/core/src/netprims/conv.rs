//! 1-D convolution (cross-correlation semantics) with same/valid padding.

use super::params::{he_init, Grads, ParamId, ParamStore};
use super::tensor::Tensor2;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output length ceil(L / stride); zero padding split left/right with the
    /// extra element on the right.
    Same,
    /// No padding; output length floor((L - K) / stride) + 1, requires L ≥ K.
    Valid,
}

pub fn conv_out_len(in_len: usize, k: usize, stride: usize, padding: Padding) -> Result<usize> {
    if k == 0 || stride == 0 {
        return Err(Error::Shape("kernel size and stride must be at least 1".into()));
    }
    match padding {
        Padding::Same => Ok(in_len.div_ceil(stride)),
        Padding::Valid => {
            if in_len < k {
                return Err(Error::Shape(format!(
                    "valid padding needs input length ≥ kernel ({in_len} < {k})"
                )));
            }
            Ok((in_len - k) / stride + 1)
        }
    }
}

fn pad_left(in_len: usize, out_len: usize, k: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => 0,
        Padding::Same => {
            let span = (out_len - 1) * stride + k;
            span.saturating_sub(in_len) / 2
        }
    }
}

/// Output positions t in [t0, t1) for which t*stride + off indexes into the
/// input.
fn t_range(off: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let first = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(stride) };
    let t0 = first.min(out_len);
    let max_idx = in_len as isize - 1 - off;
    if max_idx < 0 {
        return (t0, t0);
    }
    let t1 = (max_idx as usize / stride + 1).min(out_len);
    (t0, t1.max(t0))
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: Padding,
}

#[derive(Debug, Clone, Copy)]
pub enum ConvInit {
    He,
    Zeros,
    /// Center-tap identity (requires c_in == c_out); with a strided shortcut
    /// this passes the downsampled input through unchanged.
    Identity,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: Padding,
        seed: u64,
        init: ConvInit,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let len = c_out * c_in * k;
        let weights = match init {
            ConvInit::He => he_init(seed, &wname, c_in * k, len),
            ConvInit::Zeros => vec![F::zero(); len],
            ConvInit::Identity => {
                if c_in != c_out {
                    return Err(Error::InvalidConfig(
                        "identity conv init needs matching channel counts".into(),
                    ));
                }
                let mut w = vec![F::zero(); len];
                for o in 0..c_out {
                    w[o * c_in * k + o * k + k / 2] = F::one();
                }
                w
            }
        };
        let w = store.register(&wname, c_out, c_in * k, weights)?;
        let b = store.register(&format!("{name}.bias"), 1, c_out, vec![F::zero(); c_out])?;
        Ok(Conv1d { w, b, c_in, c_out, k, stride, padding })
    }

    pub fn out_len(&self, in_len: usize) -> Result<usize> {
        conv_out_len(in_len, self.k, self.stride, self.padding)
    }

    pub fn forward<F: Scalar>(&self, store: &ParamStore<F>, x: &Tensor2<F>) -> Result<Tensor2<F>> {
        if x.rows() != self.c_in {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.c_in,
                x.rows()
            )));
        }
        let in_len = x.cols();
        let out_len = self.out_len(in_len)?;
        let pad = pad_left(in_len, out_len, self.k, self.stride, self.padding);
        let w = store.value(self.w);
        let b = store.value(self.b);

        let mut y = Tensor2::zeros(self.c_out, out_len);
        for o in 0..self.c_out {
            let y_row = y.row_mut(o);
            y_row.iter_mut().for_each(|v| *v = b[o]);
            for i in 0..self.c_in {
                let x_row = x.row(i);
                let w_base = o * self.c_in * self.k + i * self.k;
                for kk in 0..self.k {
                    let wv = w[w_base + kk];
                    if wv == F::zero() {
                        continue;
                    }
                    let off = kk as isize - pad as isize;
                    let (t0, t1) = t_range(off, self.stride, in_len, out_len);
                    if t0 >= t1 {
                        continue;
                    }
                    if self.stride == 1 {
                        let x0 = (t0 as isize + off) as usize;
                        let xs = &x_row[x0..x0 + (t1 - t0)];
                        for (yv, &xv) in y_row[t0..t1].iter_mut().zip(xs) {
                            *yv += wv * xv;
                        }
                    } else {
                        for t in t0..t1 {
                            let xi = (t as isize * self.stride as isize + off) as usize;
                            y_row[t] += wv * x_row[xi];
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    /// Backward pass: accumulates weight/bias gradients into `grads` and
    /// returns the input gradient.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor2<F>,
        dy: &Tensor2<F>,
        grads: &mut Grads<F>,
    ) -> Tensor2<F> {
        let in_len = x.cols();
        let out_len = dy.cols();
        let pad = pad_left(in_len, out_len, self.k, self.stride, self.padding);
        let w = store.value(self.w);

        let mut dx = Tensor2::zeros(self.c_in, in_len);
        for o in 0..self.c_out {
            let dy_row = dy.row(o);
            let db = &mut grads.seg_mut(self.b)[o];
            for &d in dy_row {
                *db += d;
            }
            for i in 0..self.c_in {
                let x_row = x.row(i);
                let dx_row = dx.row_mut(i);
                let w_base = o * self.c_in * self.k + i * self.k;
                for kk in 0..self.k {
                    let off = kk as isize - pad as isize;
                    let (t0, t1) = t_range(off, self.stride, in_len, out_len);
                    if t0 >= t1 {
                        continue;
                    }
                    let wv = w[w_base + kk];
                    let mut dw = F::zero();
                    if self.stride == 1 {
                        let x0 = (t0 as isize + off) as usize;
                        let n = t1 - t0;
                        for ((&d, &xv), dxv) in dy_row[t0..t1]
                            .iter()
                            .zip(&x_row[x0..x0 + n])
                            .zip(&mut dx_row[x0..x0 + n])
                        {
                            dw += d * xv;
                            *dxv += wv * d;
                        }
                    } else {
                        for t in t0..t1 {
                            let xi = (t as isize * self.stride as isize + off) as usize;
                            let d = dy_row[t];
                            dw += d * x_row[xi];
                            dx_row[xi] += wv * d;
                        }
                    }
                    grads.seg_mut(self.w)[w_base + kk] += dw;
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store64() -> ParamStore<f64> {
        ParamStore::new()
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut store = store64();
        let conv =
            Conv1d::init(&mut store, "c", 1, 1, 1, 1, Padding::Same, 0, ConvInit::Identity)
                .unwrap();
        let x = Tensor2::from_vec(1, 5, vec![1.0, -2.0, 3.0, 0.5, 4.0]).unwrap();
        let y = conv.forward(&store, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn same_padding_length_formula() {
        // 1201 / stride 2 rounds up to 601.
        assert_eq!(conv_out_len(1201, 17, 2, Padding::Same).unwrap(), 601);
        assert_eq!(conv_out_len(6801, 17, 2, Padding::Same).unwrap(), 3401);
        assert_eq!(conv_out_len(100, 17, 2, Padding::Same).unwrap(), 50);
    }

    #[test]
    fn valid_padding_requires_min_length() {
        assert!(matches!(
            conv_out_len(10, 17, 1, Padding::Valid),
            Err(Error::Shape(_))
        ));
        assert_eq!(conv_out_len(17, 17, 1, Padding::Valid).unwrap(), 1);
        assert_eq!(conv_out_len(20, 3, 2, Padding::Valid).unwrap(), 9);
    }

    #[test]
    fn forward_matches_direct_computation() {
        // Direct sliding-window oracle on a small case.
        let mut store = store64();
        let conv =
            Conv1d::init(&mut store, "c", 1, 1, 3, 1, Padding::Same, 0, ConvInit::Zeros).unwrap();
        store.value_mut(conv.w).copy_from_slice(&[1.0, 2.0, 3.0]);
        store.value_mut(conv.b).copy_from_slice(&[0.5]);
        let x = Tensor2::from_vec(1, 4, vec![1.0, 1.0, 2.0, -1.0]).unwrap();
        let y = conv.forward(&store, &x).unwrap();
        // pad_left = 1; y[t] = 0.5 + 1*x[t-1] + 2*x[t] + 3*x[t+1]
        assert_eq!(y.row(0), &[0.5 + 2.0 + 3.0, 0.5 + 1.0 + 2.0 + 6.0, 0.5 + 1.0 + 4.0 - 3.0, 0.5 + 2.0 - 2.0]);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut store = store64();
        let conv =
            Conv1d::init(&mut store, "c", 2, 1, 3, 1, Padding::Same, 0, ConvInit::He).unwrap();
        let x = Tensor2::zeros(1, 8);
        assert!(matches!(conv.forward(&store, &x), Err(Error::Shape(_))));
    }
}
