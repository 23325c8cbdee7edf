#![allow(dead_code)]

use std::sync::Arc;

use assim_core::cost::{build_minimum_energy, CoordinateProjection, MatrixFn, QuadraticCost, QuadraticCostSpec};
use assim_core::dynamics::{integrate_state, ControlPath, LinearModel, Lorenz63, Lorenz63Params};
use assim_core::roughpath::{build_observation, cumulative_trapezoid, SampledPath, TimeGrid};
use nalgebra::{DMatrix, DVector};

pub fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

pub fn lorenz() -> Lorenz63 {
    Lorenz63::new(Lorenz63Params::default()).unwrap()
}

/// A state on the attractor: spin-up of 5 time units from (1, 1, 1).
pub fn attractor_state() -> DVector<f64> {
    let g = TimeGrid::new(5.0, 5000).unwrap();
    integrate_state(&lorenz(), &ControlPath::zeros(g, 3), &v(&[1.0, 1.0, 1.0]))
        .unwrap()
        .last()
        .clone()
}

pub fn lorenz_cost(grid: &TimeGrid, observed: Vec<usize>, r: f64, s: f64) -> QuadraticCost {
    let d = observed.len();
    build_minimum_energy(
        QuadraticCostSpec {
            h: Arc::new(CoordinateProjection::new(observed, 3).unwrap()),
            r: MatrixFn::Constant(DMatrix::identity(d, d) * r),
            s: MatrixFn::Constant(DMatrix::identity(3, 3) * s),
            control_dim: 3,
        },
        grid,
    )
    .unwrap()
}

pub struct Twin {
    pub grid: TimeGrid,
    pub truth: SampledPath,
    pub eta: SampledPath,
    pub xi_truth: DVector<f64>,
}

/// Truth from `xi_truth` with zero control, observations of `observed`
/// coordinates in integrated form plus `noise * W`.
pub fn twin(horizon: f64, n_steps: usize, observed: &[usize], noise: f64, seed: u64) -> Twin {
    let grid = TimeGrid::new(horizon, n_steps).unwrap();
    let xi_truth = attractor_state();
    let truth = integrate_state(&lorenz(), &ControlPath::zeros(grid, 3), &xi_truth).unwrap();
    let h = truth
        .map(|_, x| DVector::from_iterator(observed.len(), observed.iter().map(|&k| x[k])))
        .unwrap();
    let zeta = cumulative_trapezoid(&h);
    let eta = build_observation(&zeta, noise, seed).unwrap().path;
    Twin {
        grid,
        truth,
        eta,
        xi_truth,
    }
}

pub fn scalar_lq_cost(q: f64, r: f64, grid: &TimeGrid) -> QuadraticCost {
    build_minimum_energy(
        QuadraticCostSpec {
            h: Arc::new(CoordinateProjection::full(1)),
            r: MatrixFn::Constant(DMatrix::from_element(1, 1, q)),
            s: MatrixFn::Constant(DMatrix::from_element(1, 1, r)),
            control_dim: 1,
        },
        grid,
    )
    .unwrap()
}

pub fn scalar_model(a: f64) -> LinearModel {
    LinearModel::scalar(a)
}
