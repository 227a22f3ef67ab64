//! Central finite-difference utilities backing every gradient test.
//!
//! The analytic/numeric comparison uses a mixed tolerance
//! |a − n| ≤ tol·max(|a|, |n|) + 1e-8; the absolute floor sits above the
//! f64 round-off of a central difference at h = 1e-5 and below any gradient
//! the tests care about.

use super::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-8;

pub fn grad_close(analytic: f64, numeric: f64, rel_tol: f64) -> bool {
    (analytic - numeric).abs() <= rel_tol * analytic.abs().max(numeric.abs()) + FD_ABS_FLOOR
}

/// Central difference of `loss` w.r.t. one parameter coordinate. Restores the
/// original value afterwards.
pub fn fd_param<F: Scalar>(
    store: &mut ParamStore<F>,
    id: ParamId,
    idx: usize,
    h: f64,
    loss: &mut impl FnMut(&ParamStore<F>) -> f64,
) -> f64 {
    let orig = store.value(id)[idx];
    store.value_mut(id)[idx] = F::of(orig.as_f64() + h);
    let up = loss(store);
    store.value_mut(id)[idx] = F::of(orig.as_f64() - h);
    let down = loss(store);
    store.value_mut(id)[idx] = orig;
    (up - down) / (2.0 * h)
}

/// Central difference w.r.t. one input slot exposed through a mutable slice
/// accessor.
pub fn fd_slice(values: &mut [f64], idx: usize, h: f64, loss: &mut impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = values[idx];
    values[idx] = orig + h;
    let up = loss(values);
    values[idx] = orig - h;
    let down = loss(values);
    values[idx] = orig;
    (up - down) / (2.0 * h)
}

/// Deterministic coordinate sample: `count` indices spread over `len`.
pub fn sample_coords(len: usize, count: usize, salt: u64) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count)
        .map(|i| {
            let mix = salt
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(i as u64 * 0x517c_c1b7_2722_0a95);
            (mix % len as u64) as usize
        })
        .collect()
}
