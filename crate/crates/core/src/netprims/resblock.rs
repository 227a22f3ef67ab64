//! Residual convolution block: conv → relu → conv, plus a strided 1-tap
//! shortcut so the skip path matches the downsampled length.

use super::activation::{relu, relu_backward};
use super::conv::{Conv1d, ConvInit, Padding};
use super::params::{Grads, ParamStore};
use super::tensor::Tensor2;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    /// Present when stride > 1; identity-initialized so an untrained block
    /// passes the downsampled input through.
    pub shortcut: Option<Conv1d>,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct ResBlockCache<F> {
    x: Tensor2<F>,
    pre_act: Tensor2<F>,
    hidden: Tensor2<F>,
}

impl ResBlock {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        k: usize,
        stride: usize,
        seed: u64,
        init: ConvInit,
    ) -> Result<Self> {
        let conv1 = Conv1d::init(
            store,
            &format!("{name}.conv1"),
            channels,
            channels,
            k,
            stride,
            Padding::Same,
            seed,
            init,
        )?;
        let conv2 = Conv1d::init(
            store,
            &format!("{name}.conv2"),
            channels,
            channels,
            k,
            1,
            Padding::Same,
            seed,
            init,
        )?;
        let shortcut = if stride > 1 {
            Some(Conv1d::init(
                store,
                &format!("{name}.shortcut"),
                channels,
                channels,
                1,
                stride,
                Padding::Same,
                seed,
                ConvInit::Identity,
            )?)
        } else {
            None
        };
        Ok(ResBlock { conv1, conv2, shortcut, channels, stride })
    }

    pub fn out_len(&self, in_len: usize) -> Result<usize> {
        self.conv1.out_len(in_len)
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor2<F>,
    ) -> Result<(Tensor2<F>, ResBlockCache<F>)> {
        if x.rows() != self.channels {
            return Err(Error::Shape(format!(
                "residual block expects {} channels, got {}",
                self.channels,
                x.rows()
            )));
        }
        let pre_act = self.conv1.forward(store, x)?;
        let hidden = relu(&pre_act);
        let mut y = self.conv2.forward(store, &hidden)?;
        match &self.shortcut {
            Some(sc) => {
                let skip = sc.forward(store, x)?;
                for (a, &b) in y.data_mut().iter_mut().zip(skip.data()) {
                    *a += b;
                }
            }
            None => {
                for (a, &b) in y.data_mut().iter_mut().zip(x.data()) {
                    *a += b;
                }
            }
        }
        Ok((y, ResBlockCache { x: x.clone(), pre_act, hidden }))
    }

    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        cache: &ResBlockCache<F>,
        dy: &Tensor2<F>,
        grads: &mut Grads<F>,
    ) -> Tensor2<F> {
        let dhidden = self.conv2.backward(store, &cache.hidden, dy, grads);
        let dpre = relu_backward(&cache.pre_act, &dhidden);
        let mut dx = self.conv1.backward(store, &cache.x, &dpre, grads);
        match &self.shortcut {
            Some(sc) => {
                let dskip = sc.backward(store, &cache.x, dy, grads);
                for (a, &b) in dx.data_mut().iter_mut().zip(dskip.data()) {
                    *a += b;
                }
            }
            None => {
                for (a, &b) in dx.data_mut().iter_mut().zip(dy.data()) {
                    *a += b;
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_pass_downsampled_input() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let block = ResBlock::init(&mut store, "b", 2, 3, 2, 0, ConvInit::Zeros).unwrap();
        let x = Tensor2::from_rows(&[
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            vec![-1.0, -2.0, -3.0, -4.0, -5.0, -6.0],
        ])
        .unwrap();
        let (y, _) = block.forward(&store, &x).unwrap();
        assert_eq!(y.row(0), &[1.0, 3.0, 5.0]);
        assert_eq!(y.row(1), &[-1.0, -3.0, -5.0]);
    }

    #[test]
    fn halves_length_with_default_stride() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let block = ResBlock::init(&mut store, "b", 4, 17, 2, 1, ConvInit::He).unwrap();
        assert_eq!(block.out_len(100).unwrap(), 50);
        let x = Tensor2::zeros(4, 100);
        let (y, _) = block.forward(&store, &x).unwrap();
        assert_eq!(y.cols(), 50);
        assert_eq!(y.rows(), 4);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let block = ResBlock::init(&mut store, "b", 4, 3, 2, 1, ConvInit::He).unwrap();
        let x = Tensor2::zeros(3, 10);
        assert!(matches!(block.forward(&store, &x), Err(Error::Shape(_))));
    }
}
