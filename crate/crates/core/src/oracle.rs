//! Slow, independent reference computations for the diagnostic suites.

use nalgebra::DVector;

use crate::roughpath::{SampledPath, TimeGrid};
use crate::{Error, Result};

/// p-variation by enumerating every dissection of the grid. Exponential in
/// the number of steps, so limited to 20.
pub fn brute_force_p_variation(path: &SampledPath, p: f64) -> Result<f64> {
    let n = path.grid().n_steps();
    if n > 20 {
        return Err(Error::InvalidParameter("brute-force p-variation is limited to 20 steps".into()));
    }
    if !(p >= 1.0) {
        return Err(Error::InvalidParameter(format!("p-variation needs p >= 1, got {p}")));
    }
    let values = path.values();
    let interior = n.saturating_sub(1);
    let mut best = 0.0_f64;
    for mask in 0u32..(1u32 << interior) {
        let mut last = 0;
        let mut sum = 0.0;
        for k in 1..=n {
            if k == n || mask & (1 << (k - 1)) != 0 {
                sum += (&values[k] - &values[last]).norm().powf(p);
                last = k;
            }
        }
        best = best.max(sum);
    }
    Ok(best.powf(1.0 / p))
}

/// Scalar linear-quadratic problem `x' = a x + u`,
/// `J = int (q x^2 + r u^2) / 2 dt`, free terminal state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarLq {
    pub a: f64,
    pub q: f64,
    pub r: f64,
    pub horizon: f64,
}

impl ScalarLq {
    pub fn new(a: f64, q: f64, r: f64, horizon: f64) -> Result<Self> {
        if !(q >= 0.0) || !(r > 0.0) || !(horizon > 0.0) || !a.is_finite() {
            return Err(Error::InvalidParameter("LQ needs q >= 0, r > 0, T > 0".into()));
        }
        Ok(Self { a, q, r, horizon })
    }

    /// Riccati solution of `P' = -2aP - q + P^2/r`, `P(T) = 0`, in closed form.
    pub fn p(&self, t: f64) -> f64 {
        let tau = self.horizon - t;
        let beta = (self.a * self.a + self.q / self.r).sqrt();
        let (s, c) = ((beta * tau).sinh(), (beta * tau).cosh());
        self.q * s / (beta * c - self.a * s)
    }

    pub fn value(&self, xi: f64) -> f64 {
        0.5 * self.p(0.0) * xi * xi
    }

    pub fn costate0(&self, xi: f64) -> f64 {
        self.p(0.0) * xi
    }

    pub fn feedback(&self, t: f64, x: f64) -> f64 {
        -self.p(t) * x / self.r
    }

    /// Optimal closed-loop state on `grid`, RK4 with 32 substeps per step.
    pub fn trajectory(&self, grid: TimeGrid, xi: f64) -> SampledPath {
        const SUB: usize = 32;
        let h = grid.dt() / SUB as f64;
        let rate = |t: f64, x: f64| (self.a - self.p(t) / self.r) * x;
        let mut values = Vec::with_capacity(grid.n_nodes());
        let mut x = xi;
        values.push(DVector::from_element(1, x));
        for i in 0..grid.n_steps() {
            let t0 = grid.time(i);
            for k in 0..SUB {
                let t = t0 + k as f64 * h;
                let k1 = rate(t, x);
                let k2 = rate(t + 0.5 * h, x + 0.5 * h * k1);
                let k3 = rate(t + 0.5 * h, x + 0.5 * h * k2);
                let k4 = rate(t + h, x + h * k3);
                x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            values.push(DVector::from_element(1, x));
        }
        SampledPath::from_parts_unchecked(grid, 1, values)
    }
}
