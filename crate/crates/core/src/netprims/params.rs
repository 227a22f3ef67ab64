//! Named parameter storage with matching gradient slots.
//!
//! Layers hold [`ParamId`] handles into one [`ParamStore`]; the store owns
//! values, gradient slots and the global optimization step counter.
//! [`Grads`] is detached scratch for accumulating gradients (e.g. one buffer
//! per parallel worker) that merges back into the store in a fixed order.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeding::rng_for;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Param<F> {
    name: String,
    rows: usize,
    cols: usize,
    value: Vec<F>,
    grad: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    by_name: HashMap<String, usize>,
    step: u64,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new(), step: 0 }
    }

    pub fn register(&mut self, name: &str, rows: usize, cols: usize, value: Vec<F>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name {name:?}")));
        }
        if value.len() != rows * cols {
            return Err(Error::Shape(format!(
                "parameter {name:?} declared {rows}x{cols} but has {} values",
                value.len()
            )));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.to_string(), id.0);
        let grad = vec![F::zero(); value.len()];
        self.params.push(Param { name: name.to_string(), rows, cols, value, grad });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        let p = &self.params[id.0];
        (p.rows, p.cols)
    }

    pub fn value(&self, id: ParamId) -> &[F] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[F] {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.params[id.0].grad
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn bump_step(&mut self) {
        self.step += 1;
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = F::zero());
        }
    }

    /// Adds a detached gradient buffer into the store's gradient slots, in
    /// parameter order.
    pub fn add_grads(&mut self, grads: &Grads<F>) {
        debug_assert_eq!(grads.segs.len(), self.params.len());
        for (p, seg) in self.params.iter_mut().zip(&grads.segs) {
            for (g, &d) in p.grad.iter_mut().zip(seg) {
                *g += d;
            }
        }
    }

    /// Copy of all parameter values, for checkpoint snapshots.
    pub fn snapshot_values(&self) -> Vec<Vec<F>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore_values(&mut self, snapshot: &[Vec<F>]) {
        assert_eq!(snapshot.len(), self.params.len(), "snapshot/store mismatch");
        for (p, s) in self.params.iter_mut().zip(snapshot) {
            p.value.copy_from_slice(s);
        }
    }

    /// Iterates (name, rows, cols, values) in registration order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, usize, usize, &[F])> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), p.rows, p.cols, p.value.as_slice()))
    }
}

/// Detached gradient buffers aligned with a store's parameters.
#[derive(Debug, Clone)]
pub struct Grads<F> {
    segs: Vec<Vec<F>>,
}

impl<F: Scalar> Grads<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Grads { segs: store.params.iter().map(|p| vec![F::zero(); p.value.len()]).collect() }
    }

    pub fn seg(&self, id: ParamId) -> &[F] {
        &self.segs[id.0]
    }

    pub fn seg_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.segs[id.0]
    }

    pub fn add(&mut self, other: &Grads<F>) {
        debug_assert_eq!(self.segs.len(), other.segs.len());
        for (a, b) in self.segs.iter_mut().zip(&other.segs) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for seg in &mut self.segs {
            seg.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.segs.iter().all(|s| s.iter().all(|g| g.is_finite()))
    }
}

/// He-style normal initialization: std = sqrt(2 / fan_in). Each parameter's
/// stream is seeded from (seed, name), so initialization is independent of
/// registration order.
pub fn he_init<F: Scalar>(seed: u64, name: &str, fan_in: usize, len: usize) -> Vec<F> {
    normal_init(seed, name, (2.0 / fan_in.max(1) as f64).sqrt(), len)
}

pub fn normal_init<F: Scalar>(seed: u64, name: &str, std: f64, len: usize) -> Vec<F> {
    let mut rng = rng_for(seed, name, 0);
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            F::of(z * std)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_and_access() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store.register("w", 2, 3, vec![1.0; 6]).unwrap();
        assert_eq!(store.shape(id), (2, 3));
        assert_eq!(store.value(id).len(), 6);
        assert_eq!(store.grad(id).len(), 6);
        assert!(store.register("w", 1, 1, vec![0.0]).is_err());
    }

    #[test]
    fn grads_merge_in_order() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store.register("w", 1, 2, vec![0.0, 0.0]).unwrap();
        let mut g1 = Grads::zeros_like(&store);
        g1.seg_mut(id)[0] = 1.0;
        let mut g2 = Grads::zeros_like(&store);
        g2.seg_mut(id)[1] = 2.0;
        store.add_grads(&g1);
        store.add_grads(&g2);
        assert_eq!(store.grad(id), &[1.0, 2.0]);
    }

    #[test]
    fn init_is_name_seeded_not_order_seeded() {
        let a: Vec<f64> = he_init(9, "layer.w", 8, 16);
        let b: Vec<f64> = he_init(9, "layer.w", 8, 16);
        let c: Vec<f64> = he_init(9, "other.w", 8, 16);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
