//! Parameter updates. Adam is the default; a plain-SGD mode exists for
//! analytically checkable behaviour.

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adam()
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer<F> {
    pub kind: OptimizerKind,
    pub lr: F,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer { kind, lr: F::of(lr), m: Vec::new(), v: Vec::new() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = F::of(lr);
    }

    pub fn lr(&self) -> f64 {
        self.lr.as_f64()
    }

    /// Applies one update from the store's gradient slots, clears the
    /// gradients and advances the global step counter.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        for id in store.ids() {
            if store.grad(id).iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in parameter {:?}",
                    store.name(id)
                )));
            }
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for id in store.ids() {
                    let grads: Vec<F> = store.grad(id).to_vec();
                    for (p, g) in store.value_mut(id).iter_mut().zip(grads) {
                        *p = *p - self.lr * g;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.m.is_empty() {
                    self.m = store.ids().map(|id| vec![F::zero(); store.value(id).len()]).collect();
                    self.v = self.m.clone();
                }
                let t = (store.step() + 1) as i32;
                let b1 = F::of(beta1);
                let b2 = F::of(beta2);
                let eps = F::of(eps);
                let bc1 = F::one() - b1.powi(t);
                let bc2 = F::one() - b2.powi(t);
                for (slot, id) in store.ids().enumerate() {
                    let grads: Vec<F> = store.grad(id).to_vec();
                    let m = &mut self.m[slot];
                    let v = &mut self.v[slot];
                    let values = store.value_mut(id);
                    for i in 0..values.len() {
                        let g = grads[i];
                        m[i] = b1 * m[i] + (F::one() - b1) * g;
                        v[i] = b2 * v[i] + (F::one() - b2) * g * g;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        values[i] = values[i] - self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        store.zero_grads();
        store.bump_step();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netprims::linear::Linear;
    use crate::netprims::loss::softmax_cross_entropy;
    use crate::netprims::params::Grads;
    use crate::netprims::tensor::Tensor2;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store.register("p", 1, 3, vec![1.0, -2.0, 3.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.1);
        opt.step(&mut store).unwrap();
        assert_eq!(store.value(id), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn plain_sgd_update_rule() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store.register("p", 1, 1, vec![2.0]).unwrap();
        store.grad_mut(id)[0] = 0.5;
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        opt.step(&mut store).unwrap();
        assert!((store.value(id)[0] - (2.0 - 0.1 * 0.5)).abs() < 1e-15);
        assert_eq!(store.grad(id)[0], 0.0);
        assert_eq!(store.step(), 1);
    }

    #[test]
    fn non_finite_gradient_is_numerical_error() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store.register("p", 1, 1, vec![0.0]).unwrap();
        store.grad_mut(id)[0] = f64::NAN;
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        assert!(matches!(opt.step(&mut store), Err(Error::Numerical(_))));
    }

    #[test]
    fn loss_decreases_monotonically_on_separable_toy() {
        // Two linearly separable classes, full-batch SGD: the smooth convex
        // loss must fall at every one of the first 50 steps.
        let mut store: ParamStore<f64> = ParamStore::new();
        let fc = Linear::init(&mut store, "fc", 2, 2, 7).unwrap();
        let data = [
            (vec![1.0, 0.2], 0usize),
            (vec![2.0, -0.1], 0),
            (vec![-1.0, 0.1], 1),
            (vec![-2.0, -0.3], 1),
        ];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        let mut losses = Vec::new();
        for _ in 0..50 {
            let mut grads = Grads::zeros_like(&store);
            let mut total = 0.0;
            for (x, label) in &data {
                let xt = Tensor2::from_rows(std::slice::from_ref(x)).unwrap();
                let logits = fc.forward(&store, &xt).unwrap();
                let (loss, dlogits) = softmax_cross_entropy(logits.row(0), *label).unwrap();
                total += loss / data.len() as f64;
                let scaled: Vec<f64> =
                    dlogits.iter().map(|d| d / data.len() as f64).collect();
                let dt = Tensor2::from_rows(&[scaled]).unwrap();
                fc.backward(&store, &xt, &dt, &mut grads);
            }
            store.add_grads(&grads);
            opt.step(&mut store).unwrap();
            losses.push(total);
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0] + 1e-12, "loss rose: {} -> {}", w[0], w[1]);
        }
    }
}
