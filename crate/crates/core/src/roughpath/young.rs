use nalgebra::DVector;

use super::{p_variation, MatrixPath, SampledPath};
use crate::{Error, Result};

/// Placement of the evaluation point inside each grid interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    /// `x(t_i)`; the canonical evaluator.
    Left,
    /// `x(t_{i+1})`.
    Right,
    /// Piecewise-linear midpoint `(x(t_i) + x(t_{i+1})) / 2`.
    Midpoint,
}

/// Riemann–Stieltjes sum `sum_i x(tau_i) (y(t_{i+1}) - y(t_i))`.
pub fn young_integral(x: &MatrixPath, y: &SampledPath, tag: Tag) -> Result<DVector<f64>> {
    check(x, y)?;
    let mut acc = DVector::zeros(x.shape().0);
    for i in 0..y.grid().n_steps() {
        acc += tagged(x, i, tag) * y.increment(i);
    }
    Ok(acc)
}

/// Running sums `I(t_k) = sum_{i<k} x(tau_i) (y(t_{i+1}) - y(t_i))`, so
/// `I(t_0) = 0` and `I(T)` equals [`young_integral`].
pub fn young_integral_running(x: &MatrixPath, y: &SampledPath, tag: Tag) -> Result<SampledPath> {
    check(x, y)?;
    let rows = x.shape().0;
    let mut acc = DVector::zeros(rows);
    let mut values = Vec::with_capacity(y.len());
    values.push(acc.clone());
    for i in 0..y.grid().n_steps() {
        acc += tagged(x, i, tag) * y.increment(i);
        values.push(acc.clone());
    }
    Ok(SampledPath::from_parts_unchecked(*y.grid(), rows, values))
}

fn tagged(x: &MatrixPath, i: usize, tag: Tag) -> nalgebra::DMatrix<f64> {
    match tag {
        Tag::Left => x.value(i).clone(),
        Tag::Right => x.value(i + 1).clone(),
        Tag::Midpoint => (x.value(i) + x.value(i + 1)) * 0.5,
    }
}

fn check(x: &MatrixPath, y: &SampledPath) -> Result<()> {
    x.grid().ensure_same(y.grid(), "young_integral")?;
    if x.shape().1 != y.dim() {
        return Err(Error::Dimension(format!(
            "integrand has {} columns, integrator has dimension {}",
            x.shape().1,
            y.dim()
        )));
    }
    Ok(())
}

/// Both sides of the Young–Loève estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YoungBound {
    pub lhs: f64,
    pub rhs: f64,
}

impl YoungBound {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs
    }
}

/// `lhs = |int x dy - x(0)(y(T) - y(0))|` (left sums) and
/// `rhs = Var_p(x) Var_q(y) / (1 - 2^(1 - theta))`, `theta = 1/p + 1/q`.
pub fn young_bound_check(x: &MatrixPath, y: &SampledPath, p: f64, q: f64) -> Result<YoungBound> {
    let theta = 1.0 / p + 1.0 / q;
    if !(theta > 1.0) {
        return Err(Error::InvalidParameter(format!(
            "Young estimate needs 1/p + 1/q > 1, got {theta}"
        )));
    }
    let integral = young_integral(x, y, Tag::Left)?;
    let base = x.value(0) * (y.last() - y.first());
    let lhs = (integral - base).norm();
    let rhs = p_variation(&x.flattened(), p)? * p_variation(y, q)? / (1.0 - 2f64.powf(1.0 - theta));
    Ok(YoungBound { lhs, rhs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roughpath::TimeGrid;

    #[test]
    fn constant_integrand_telescopes() {
        let g = TimeGrid::new(1.0, 5).unwrap();
        let y = SampledPath::scalar(g, &[0.3, -1.0, 2.0, 0.7, 4.0, 1.5]).unwrap();
        let x = MatrixPath::from_fn(g, |_| nalgebra::DMatrix::from_element(1, 1, 2.5)).unwrap();
        for tag in [Tag::Left, Tag::Right, Tag::Midpoint] {
            let v = young_integral(&x, &y, tag).unwrap()[0];
            assert!((v - 2.5 * (1.5 - 0.3)).abs() < 1e-14);
        }
    }

    #[test]
    fn identity_against_identity() {
        let g = TimeGrid::new(1.0, 1024).unwrap();
        let t = SampledPath::from_fn(g, |t| DVector::from_element(1, t)).unwrap();
        let x = MatrixPath::from_scalar(&t).unwrap();
        let v = young_integral(&x, &t, Tag::Left).unwrap()[0];
        assert!((v - 0.5).abs() < 1e-3);
    }

    #[test]
    fn running_integral_ends_at_total() {
        let g = TimeGrid::new(1.0, 16).unwrap();
        let y = SampledPath::from_fn(g, |t| DVector::from_element(1, (3.0 * t).sin())).unwrap();
        let x = MatrixPath::from_scalar(&SampledPath::from_fn(g, |t| DVector::from_element(1, t * t)).unwrap())
            .unwrap();
        let run = young_integral_running(&x, &y, Tag::Left).unwrap();
        assert_eq!(run.first()[0], 0.0);
        let total = young_integral(&x, &y, Tag::Left).unwrap()[0];
        assert!((run.last()[0] - total).abs() < 1e-15);
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let a = TimeGrid::new(1.0, 4).unwrap();
        let b = TimeGrid::new(1.0, 8).unwrap();
        let x = MatrixPath::from_scalar(&SampledPath::zeros(a, 1)).unwrap();
        assert!(matches!(
            young_integral(&x, &SampledPath::zeros(b, 1), Tag::Left),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn bound_for_linear_paths() {
        let g = TimeGrid::new(1.0, 256).unwrap();
        let t = SampledPath::from_fn(g, |t| DVector::from_element(1, t)).unwrap();
        let x = MatrixPath::from_scalar(&t).unwrap();
        let b = young_bound_check(&x, &t, 1.0, 1.0).unwrap();
        assert!((b.lhs - 0.5).abs() < 1e-2);
        assert!((b.rhs - 2.0).abs() < 1e-12);
        assert!(b.holds());
        assert!(young_bound_check(&x, &t, 2.0, 2.0).is_err());
    }
}
