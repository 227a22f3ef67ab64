//! Not-a-knot cubic spline interpolation.
//!
//! The not-a-knot end condition makes the first two and last two polynomial
//! pieces coincide, which means the spline reproduces any polynomial of
//! degree ≤ 3 exactly. That property is what the resampling tests lean on.

use crate::error::{Error, Result};

/// Cubic spline through strictly increasing knots, not-a-knot end conditions.
pub struct CubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn fit(points: &[(f64, f64)]) -> Result<Self> {
        let n = points.len();
        if n < 4 {
            return Err(Error::InsufficientData(format!(
                "cubic spline needs at least 4 points, got {n}"
            )));
        }
        for w in points.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::InvalidInput(format!(
                    "abscissa must be strictly increasing, got {} then {}",
                    w[0].0, w[1].0
                )));
            }
        }
        if points.iter().any(|&(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::InvalidInput("spline input contains non-finite values".into()));
        }

        let x: Vec<f64> = points.iter().map(|p| p.0).collect();
        let y: Vec<f64> = points.iter().map(|p| p.1).collect();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();

        // Moment (second-derivative) formulation. Interior continuity rows
        //   h[i-1] M[i-1] + 2(h[i-1]+h[i]) M[i] + h[i] M[i+1] = d[i]
        // for i in 1..n-1, with the boundary moments eliminated through the
        // not-a-knot conditions
        //   M[0]   = (1+r0) M[1]   - r0 M[2],     r0 = h[0]/h[1]
        //   M[n-1] = (1+r1) M[n-2] - r1 M[n-3],   r1 = h[n-2]/h[n-3]
        // leaving a tridiagonal system in M[1]..M[n-2].
        let m_unknowns = n - 2;
        let mut sub = vec![0.0; m_unknowns];
        let mut diag = vec![0.0; m_unknowns];
        let mut sup = vec![0.0; m_unknowns];
        let mut rhs = vec![0.0; m_unknowns];

        let slope = |i: usize| (y[i + 1] - y[i]) / h[i];
        for (j, i) in (1..n - 1).enumerate() {
            sub[j] = h[i - 1];
            diag[j] = 2.0 * (h[i - 1] + h[i]);
            sup[j] = h[i];
            rhs[j] = 6.0 * (slope(i) - slope(i - 1));
        }
        let r0 = h[0] / h[1];
        diag[0] += h[0] * (1.0 + r0);
        sup[0] -= h[0] * r0;
        let r1 = h[n - 2] / h[n - 3];
        diag[m_unknowns - 1] += h[n - 2] * (1.0 + r1);
        sub[m_unknowns - 1] -= h[n - 2] * r1;

        // Thomas algorithm.
        let mut c_prime = vec![0.0; m_unknowns];
        let mut d_prime = vec![0.0; m_unknowns];
        c_prime[0] = sup[0] / diag[0];
        d_prime[0] = rhs[0] / diag[0];
        for j in 1..m_unknowns {
            let denom = diag[j] - sub[j] * c_prime[j - 1];
            c_prime[j] = sup[j] / denom;
            d_prime[j] = (rhs[j] - sub[j] * d_prime[j - 1]) / denom;
        }
        let mut interior = vec![0.0; m_unknowns];
        interior[m_unknowns - 1] = d_prime[m_unknowns - 1];
        for j in (0..m_unknowns - 1).rev() {
            interior[j] = d_prime[j] - c_prime[j] * interior[j + 1];
        }

        let mut m = vec![0.0; n];
        m[1..n - 1].copy_from_slice(&interior);
        m[0] = (1.0 + r0) * m[1] - r0 * m[2];
        m[n - 1] = (1.0 + r1) * m[n - 2] - r1 * m[n - 3];

        Ok(CubicSpline { x, y, m })
    }

    pub fn min_x(&self) -> f64 {
        self.x[0]
    }

    pub fn max_x(&self) -> f64 {
        *self.x.last().expect("non-empty")
    }

    /// Evaluates the spline at `t`, which must lie inside [min_x, max_x].
    /// Evaluation at a knot returns the knot value bitwise, so resampling a
    /// spectrum that already sits on the target grid is the identity.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        // Interval index: largest i with x[i] <= t, capped at n-2.
        let i = match self.x.binary_search_by(|v| v.partial_cmp(&t).expect("finite")) {
            Ok(exact) => return self.y[exact],
            Err(ins) => ins.saturating_sub(1).min(n - 2),
        };
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cubic(a: f64, b: f64, c: f64, d: f64) -> impl Fn(f64) -> f64 {
        move |x| a + b * x + c * x * x + d * x * x * x
    }

    #[test]
    fn reproduces_cubic_polynomials() {
        // Oracle: direct polynomial evaluation. A not-a-knot spline through
        // samples of a cubic is that cubic.
        let f = cubic(2.0, -1.5, 0.25, 0.0125);
        let points: Vec<(f64, f64)> = (0..40).map(|i| {
            let x = -3.0 + 0.37 * i as f64;
            (x, f(x))
        }).collect();
        let s = CubicSpline::fit(&points).unwrap();
        for i in 0..200 {
            let t = -3.0 + (points.last().unwrap().0 + 3.0) * i as f64 / 199.0;
            let want = f(t);
            let got = s.eval(t);
            assert!(
                (got - want).abs() <= 1e-9 * want.abs().max(1.0),
                "t={t}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn knot_evaluation_is_exact() {
        let points: Vec<(f64, f64)> =
            (0..10).map(|i| (i as f64, (i as f64 * 0.7).sin())).collect();
        let s = CubicSpline::fit(&points).unwrap();
        for &(x, y) in &points {
            assert_eq!(s.eval(x), y);
        }
    }

    #[test]
    fn minimum_point_count() {
        let pts: Vec<(f64, f64)> = (0..3).map(|i| (i as f64, 0.0)).collect();
        assert!(matches!(CubicSpline::fit(&pts), Err(Error::InsufficientData(_))));
        let pts: Vec<(f64, f64)> = (0..4).map(|i| (i as f64, 0.0)).collect();
        assert!(CubicSpline::fit(&pts).is_ok());
    }

    #[test]
    fn rejects_non_monotone_abscissa() {
        let pts = vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (2.0, 0.0)];
        assert!(matches!(CubicSpline::fit(&pts), Err(Error::InvalidInput(_))));
    }
}
