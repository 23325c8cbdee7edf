//! Sampled-path calculus on a uniform grid.
//!
//! Paths are stored densely at the `n_steps + 1` grid nodes. Vector values
//! use [`SampledPath`]; linear-map valued integrands use [`MatrixPath`].
//! Covectors (row vectors) are stored as column vectors and contracted with
//! `dot`.

mod csvio;
mod variation;
mod wiener;
mod young;

pub use csvio::{load_csv, read_csv, save_csv, write_csv};
pub use variation::{oscillation, p_variation, p_variation_capped, MAX_VARIATION_STEPS};
pub use wiener::{build_observation, sample_wiener, sample_wiener_stream, wiener_rng};
pub use young::{young_bound_check, young_integral, young_integral_running, Tag, YoungBound};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Uniform partition `t_i = i * T / n_steps` of `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::InvalidParameter("n_steps must be positive".into()));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.horizon
        } else {
            i as f64 * self.horizon / self.n_steps as f64
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_nodes()).map(|i| self.time(i))
    }

    /// Grid with `factor` times as many steps over the same horizon.
    pub fn refine(&self, factor: usize) -> Self {
        Self {
            horizon: self.horizon,
            n_steps: self.n_steps * factor.max(1),
        }
    }

    /// Errors unless both grids have the same horizon and step count.
    pub fn ensure_same(&self, other: &TimeGrid, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!(
                "{what}: ({}, {}) vs ({}, {})",
                self.horizon, self.n_steps, other.horizon, other.n_steps
            )));
        }
        Ok(())
    }
}

/// Values of a vector-valued function at the nodes of a [`TimeGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    grid: TimeGrid,
    dim: usize,
    values: Vec<DVector<f64>>,
}

impl SampledPath {
    pub fn new(grid: TimeGrid, values: Vec<DVector<f64>>) -> Result<Self> {
        if values.len() != grid.n_nodes() {
            return Err(Error::Dimension(format!(
                "path has {} values, grid has {} nodes",
                values.len(),
                grid.n_nodes()
            )));
        }
        let dim = values[0].len();
        if dim == 0 {
            return Err(Error::Dimension("path dimension must be positive".into()));
        }
        for (i, v) in values.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::Dimension(format!(
                    "node {i} has dimension {}, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidParameter(format!("non-finite value at node {i}")));
            }
        }
        Ok(Self { grid, dim, values })
    }

    pub fn from_fn(grid: TimeGrid, mut f: impl FnMut(f64) -> DVector<f64>) -> Result<Self> {
        let values = grid.times().map(&mut f).collect();
        Self::new(grid, values)
    }

    pub fn constant(grid: TimeGrid, value: DVector<f64>) -> Result<Self> {
        Self::new(grid, vec![value; grid.n_nodes()])
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self {
            grid,
            dim,
            values: vec![DVector::zeros(dim); grid.n_nodes()],
        }
    }

    pub fn scalar(grid: TimeGrid, values: &[f64]) -> Result<Self> {
        Self::new(grid, values.iter().map(|&v| DVector::from_element(1, v)).collect())
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, i: usize) -> &DVector<f64> {
        &self.values[i]
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn first(&self) -> &DVector<f64> {
        &self.values[0]
    }

    pub fn last(&self) -> &DVector<f64> {
        &self.values[self.values.len() - 1]
    }

    pub fn into_values(self) -> Vec<DVector<f64>> {
        self.values
    }

    /// Increment `y(t_{i+1}) - y(t_i)`.
    pub fn increment(&self, i: usize) -> DVector<f64> {
        &self.values[i + 1] - &self.values[i]
    }

    pub fn component(&self, k: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[k]).collect()
    }

    pub fn map(&self, mut f: impl FnMut(f64, &DVector<f64>) -> DVector<f64>) -> Result<Self> {
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| f(self.grid.time(i), v))
            .collect();
        Self::new(self.grid, values)
    }

    /// Every `factor`-th node, on the correspondingly coarser grid.
    pub fn subsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.grid.n_steps % factor != 0 {
            return Err(Error::InvalidParameter(format!(
                "cannot subsample {} steps by {factor}",
                self.grid.n_steps
            )));
        }
        let grid = TimeGrid::new(self.grid.horizon, self.grid.n_steps / factor)?;
        let values = self.values.iter().step_by(factor).cloned().collect();
        Ok(Self {
            grid,
            dim: self.dim,
            values,
        })
    }

    /// `max_i |y(t_i)|` in the Euclidean norm.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// `max_i |y(t_i) - z(t_i)|`.
    pub fn sup_distance(&self, other: &SampledPath) -> Result<f64> {
        self.grid.ensure_same(&other.grid, "sup_distance")?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max))
    }

    /// Scalar path `|y(t)|`.
    pub fn norms(&self) -> SampledPath {
        Self {
            grid: self.grid,
            dim: 1,
            values: self
                .values
                .iter()
                .map(|v| DVector::from_element(1, v.norm()))
                .collect(),
        }
    }

    pub(crate) fn from_parts_unchecked(grid: TimeGrid, dim: usize, values: Vec<DVector<f64>>) -> Self {
        debug_assert_eq!(values.len(), grid.n_nodes());
        Self { grid, dim, values }
    }
}

/// Values of a linear-map valued function (`rows x cols` matrices) at grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixPath {
    grid: TimeGrid,
    rows: usize,
    cols: usize,
    values: Vec<DMatrix<f64>>,
}

impl MatrixPath {
    pub fn new(grid: TimeGrid, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if values.len() != grid.n_nodes() {
            return Err(Error::Dimension(format!(
                "matrix path has {} values, grid has {} nodes",
                values.len(),
                grid.n_nodes()
            )));
        }
        let (rows, cols) = values[0].shape();
        for (i, v) in values.iter().enumerate() {
            if v.shape() != (rows, cols) {
                return Err(Error::Dimension(format!("node {i} has shape {:?}", v.shape())));
            }
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidParameter(format!("non-finite value at node {i}")));
            }
        }
        Ok(Self {
            grid,
            rows,
            cols,
            values,
        })
    }

    pub fn from_fn(grid: TimeGrid, mut f: impl FnMut(f64) -> DMatrix<f64>) -> Result<Self> {
        let values = grid.times().map(&mut f).collect();
        Self::new(grid, values)
    }

    /// A scalar path viewed as `1 x 1` matrices.
    pub fn from_scalar(path: &SampledPath) -> Result<Self> {
        if path.dim() != 1 {
            return Err(Error::Dimension("from_scalar needs a 1-dimensional path".into()));
        }
        Self::new(
            path.grid,
            path.values.iter().map(|v| DMatrix::from_element(1, 1, v[0])).collect(),
        )
    }

    /// A covector path viewed as `1 x n` row matrices.
    pub fn from_covectors(path: &SampledPath) -> Self {
        Self {
            grid: path.grid,
            rows: 1,
            cols: path.dim,
            values: path.values.iter().map(|v| DMatrix::from_row_slice(1, v.len(), v.as_slice())).collect(),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn value(&self, i: usize) -> &DMatrix<f64> {
        &self.values[i]
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    /// Entries flattened into vectors; the Euclidean norm becomes the
    /// Frobenius norm, which dominates the operator norm.
    pub fn flattened(&self) -> SampledPath {
        SampledPath {
            grid: self.grid,
            dim: self.rows * self.cols,
            values: self
                .values
                .iter()
                .map(|m| DVector::from_column_slice(m.as_slice()))
                .collect(),
        }
    }
}

/// Integrated observations `eta = zeta + noise_scale * W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPath {
    pub path: SampledPath,
    pub seed: u64,
    pub noise_scale: f64,
}

impl ObservationPath {
    pub fn path(&self) -> &SampledPath {
        &self.path
    }
}

/// Running trapezoid integral `int_0^{t_k} y(s) ds` of a sampled path.
pub fn cumulative_trapezoid(path: &SampledPath) -> SampledPath {
    let dt = path.grid.dt();
    let mut acc = DVector::zeros(path.dim);
    let mut values = Vec::with_capacity(path.len());
    values.push(acc.clone());
    for i in 0..path.grid.n_steps() {
        acc += (&path.values[i] + &path.values[i + 1]) * (0.5 * dt);
        values.push(acc.clone());
    }
    SampledPath::from_parts_unchecked(path.grid, path.dim, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_nodes_are_uniform() {
        let g = TimeGrid::new(2.0, 8).unwrap();
        assert_eq!(g.n_nodes(), 9);
        assert_eq!(g.time(8), 2.0);
        assert_eq!(g.dt(), 0.25);
        let t: Vec<f64> = g.times().collect();
        assert!(t.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn grid_rejects_bad_parameters() {
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(-1.0, 4).is_err());
        assert!(TimeGrid::new(f64::NAN, 4).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn path_validates_length_and_finiteness() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        assert!(SampledPath::scalar(g, &[0.0, 1.0]).is_err());
        assert!(SampledPath::scalar(g, &[0.0, f64::INFINITY, 1.0]).is_err());
        assert!(SampledPath::scalar(g, &[0.0, 1.0, 2.0]).is_ok());
    }

    #[test]
    fn subsample_keeps_every_other_node() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let p = SampledPath::scalar(g, &[0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = p.subsample(2).unwrap();
        assert_eq!(c.component(0), vec![0.0, 2.0, 4.0]);
        assert_eq!(c.grid().n_steps(), 2);
        assert!(p.subsample(3).is_err());
    }

    #[test]
    fn cumulative_trapezoid_of_linear_is_exact() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let p = SampledPath::from_fn(g, |t| DVector::from_element(1, t)).unwrap();
        let c = cumulative_trapezoid(&p);
        assert!((c.last()[0] - 0.5).abs() < 1e-15);
    }
}
