//! Running costs and the cost functional
//!
//! `A(x, u) = int phi(t, x, u) dt + int psi(t, x) d eta`,
//!
//! with the second term a Young integral against the observation path.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{velocity, ControlPath, Model};
use crate::roughpath::{SampledPath, TimeGrid};
use crate::{Error, Result};

/// Deterministic running cost `phi` and stochastic running cost `psi`.
///
/// `psi(t, x)` is a covector acting on observation increments; covectors are
/// returned as column vectors. `psi_x` is the `d x n` matrix
/// `d psi_j / d x_k`.
pub trait Cost: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;

    fn phi(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    /// `D_x phi`.
    fn phi_x(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// `D_u phi`.
    fn phi_u(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    fn psi(&self, t: f64, x: &DVector<f64>) -> DVector<f64>;
    fn psi_x(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64>;
    /// `D_t psi`, when available.
    fn psi_t(&self, _t: f64, _x: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }

    /// `S(t)` when `phi(t, x, u) = a(t, x) + u^T S(t) u / 2`.
    fn control_hessian(&self, _t: f64) -> Option<DMatrix<f64>> {
        None
    }
}

/// Deterministic and stochastic parts of a cost evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    pub deterministic: f64,
    pub stochastic: f64,
    /// Sum of both parts, accumulated term by term.
    pub total: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.total
    }
}

fn check_inputs(cost: &dyn Cost, x: &SampledPath, u: &ControlPath, eta: &SampledPath) -> Result<()> {
    x.grid().ensure_same(u.grid(), "cost state/control")?;
    x.grid().ensure_same(eta.grid(), "cost state/observation")?;
    if x.dim() != cost.state_dim() || u.dim() != cost.control_dim() || eta.dim() != cost.obs_dim() {
        return Err(Error::Dimension(format!(
            "cost expects (n, m, d) = ({}, {}, {}), got ({}, {}, {})",
            cost.state_dim(),
            cost.control_dim(),
            cost.obs_dim(),
            x.dim(),
            u.dim(),
            eta.dim()
        )));
    }
    Ok(())
}

/// Neumaier summation. Costs are small differences of large sums on the
/// Lorenz attractor, and line searches compare them to ~1e-12.
#[derive(Debug, Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.carry
    }
}

/// Trapezoid rule in `t -> phi(t, x(t), u)` with the interval's left control
/// value at both ends, plus the left-point Young sum
/// `sum_i psi(t_i, x(t_i)) (eta(t_{i+1}) - eta(t_i))`.
pub fn eval_cost_parts(cost: &dyn Cost, x: &SampledPath, u: &ControlPath, eta: &SampledPath) -> Result<CostBreakdown> {
    check_inputs(cost, x, u, eta)?;
    let grid = x.grid();
    let dt = grid.dt();
    let mut det = CompensatedSum::default();
    let mut sto = CompensatedSum::default();
    let mut all = CompensatedSum::default();
    for i in 0..grid.n_steps() {
        let ui = u.interval(i);
        let a = cost.phi(grid.time(i), x.value(i), ui);
        let b = cost.phi(grid.time(i + 1), x.value(i + 1), ui);
        let stochastic = cost.psi(grid.time(i), x.value(i)).dot(&eta.increment(i));
        for term in [0.5 * dt * a, 0.5 * dt * b] {
            det.add(term);
            all.add(term);
        }
        sto.add(stochastic);
        all.add(stochastic);
    }
    let (det, sto) = (det.value(), sto.value());
    if !det.is_finite() {
        return Err(Error::BlowUp {
            what: "deterministic cost",
            node: grid.n_steps(),
        });
    }
    if !sto.is_finite() {
        return Err(Error::BlowUp {
            what: "stochastic cost",
            node: grid.n_steps(),
        });
    }
    Ok(CostBreakdown {
        deterministic: det,
        stochastic: sto,
        total: all.value(),
    })
}

pub fn eval_cost(cost: &dyn Cost, x: &SampledPath, u: &ControlPath, eta: &SampledPath) -> Result<f64> {
    eval_cost_parts(cost, x, u, eta).map(|c| c.total())
}

/// The same functional after integrating the stochastic term by parts:
///
/// `int phi~ dt + psi(T, x(T)) eta(T) - psi(0, x(0)) eta(0)` with
/// `phi~ = phi - (D_t psi + D_x psi (f + g u)) eta(t)`.
///
/// Agrees with [`eval_cost`] in the grid limit for smooth `psi`.
pub fn eval_cost_by_parts(
    cost: &dyn Cost,
    model: &dyn Model,
    x: &SampledPath,
    u: &ControlPath,
    eta: &SampledPath,
) -> Result<f64> {
    check_inputs(cost, x, u, eta)?;
    let grid = x.grid();
    let dt = grid.dt();
    let modified = |t: f64, xs: &DVector<f64>, us: &DVector<f64>, e: &DVector<f64>| -> Result<f64> {
        let psi_t = cost
            .psi_t(t, xs)
            .ok_or_else(|| Error::UnsupportedCost("by-parts evaluation needs D_t psi".into()))?;
        let rate = psi_t + cost.psi_x(t, xs) * velocity(model, t, xs, us);
        Ok(cost.phi(t, xs, us) - rate.dot(e))
    };
    let mut total = 0.0;
    for i in 0..grid.n_steps() {
        let ui = u.interval(i);
        let a = modified(grid.time(i), x.value(i), ui, eta.value(i))?;
        let b = modified(grid.time(i + 1), x.value(i + 1), ui, eta.value(i + 1))?;
        total += 0.5 * dt * (a + b);
    }
    let n = grid.n_steps();
    total += cost.psi(grid.time(n), x.value(n)).dot(eta.value(n));
    total -= cost.psi(0.0, x.value(0)).dot(eta.value(0));
    Ok(total)
}

/// Observation operator `h(t, x)` with values in `R^d`.
pub trait ObservationOperator: Send + Sync {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn eval(&self, t: f64, x: &DVector<f64>) -> DVector<f64>;
    /// `d x n` Jacobian in `x`.
    fn jacobian(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64>;
    /// `D_t h`; zero for time-independent operators.
    fn time_derivative(&self, _t: f64, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.obs_dim())
    }
}

/// `h(x) = (x_{i_1}, ..., x_{i_d})`.
#[derive(Debug, Clone)]
pub struct CoordinateProjection {
    indices: Vec<usize>,
    state_dim: usize,
}

impl CoordinateProjection {
    pub fn new(indices: Vec<usize>, state_dim: usize) -> Result<Self> {
        if indices.is_empty() || indices.iter().any(|&i| i >= state_dim) {
            return Err(Error::InvalidSpec(format!(
                "projection indices {indices:?} invalid for state dimension {state_dim}"
            )));
        }
        Ok(Self { indices, state_dim })
    }

    pub fn full(state_dim: usize) -> Self {
        Self {
            indices: (0..state_dim).collect(),
            state_dim,
        }
    }
}

impl ObservationOperator for CoordinateProjection {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn obs_dim(&self) -> usize {
        self.indices.len()
    }

    fn eval(&self, _t: f64, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.indices.len(), self.indices.iter().map(|&i| x[i]))
    }

    fn jacobian(&self, _t: f64, _x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.indices.len(), self.state_dim);
        for (row, &i) in self.indices.iter().enumerate() {
            j[(row, i)] = 1.0;
        }
        j
    }
}

type MatrixFnPtr = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

/// A matrix-valued function of time.
#[derive(Clone)]
pub enum MatrixFn {
    Constant(DMatrix<f64>),
    /// Values and (optionally) the time derivative, both evaluated at grid
    /// nodes; smoothness is the caller's responsibility.
    TimeVarying {
        value: MatrixFnPtr,
        derivative: Option<MatrixFnPtr>,
    },
}

impl MatrixFn {
    pub fn at(&self, t: f64) -> DMatrix<f64> {
        match self {
            MatrixFn::Constant(m) => m.clone(),
            MatrixFn::TimeVarying { value, .. } => value(t),
        }
    }

    pub fn derivative_at(&self, t: f64) -> Option<DMatrix<f64>> {
        match self {
            MatrixFn::Constant(m) => Some(DMatrix::zeros(m.nrows(), m.ncols())),
            MatrixFn::TimeVarying { derivative, .. } => derivative.as_ref().map(|d| d(t)),
        }
    }

    fn is_constant(&self) -> bool {
        matches!(self, MatrixFn::Constant(_))
    }
}

impl std::fmt::Debug for MatrixFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MatrixFn::Constant(m) => f.debug_tuple("Constant").field(m).finish(),
            MatrixFn::TimeVarying { derivative, .. } => f
                .debug_struct("TimeVarying")
                .field("has_derivative", &derivative.is_some())
                .finish(),
        }
    }
}

/// Ingredients of the quadratic (minimum-energy / weak-constraint 4D-Var)
/// index `1/2 int h^T R h dt - int h^T R d eta + 1/2 int u^T S u dt`.
#[derive(Clone)]
pub struct QuadraticCostSpec {
    pub h: Arc<dyn ObservationOperator>,
    pub r: MatrixFn,
    pub s: MatrixFn,
    pub control_dim: usize,
}

/// `phi = h^T R h / 2 + u^T S u / 2`, `psi = -h^T R`.
#[derive(Clone)]
pub struct QuadraticCost {
    spec: QuadraticCostSpec,
    min_control_eigenvalue: f64,
}

fn symmetric_tolerance(m: &DMatrix<f64>) -> f64 {
    1e-12 * m.norm().max(1.0)
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

/// Validates `R` (symmetric, nonnegative definite) and `S` (symmetric,
/// uniformly positive definite) at every node of `grid`.
pub fn build_minimum_energy(spec: QuadraticCostSpec, grid: &TimeGrid) -> Result<QuadraticCost> {
    let d = spec.h.obs_dim();
    let m = spec.control_dim;
    if m == 0 {
        return Err(Error::InvalidSpec("control dimension must be positive".into()));
    }
    let sample_times: Vec<f64> = if spec.r.is_constant() && spec.s.is_constant() {
        vec![0.0]
    } else {
        grid.times().collect()
    };
    let mut s_min = f64::INFINITY;
    for t in sample_times {
        let r = spec.r.at(t);
        let s = spec.s.at(t);
        if r.shape() != (d, d) || s.shape() != (m, m) {
            return Err(Error::InvalidSpec(format!(
                "R must be {d}x{d} and S {m}x{m}, got {:?} and {:?} at t = {t}",
                r.shape(),
                s.shape()
            )));
        }
        if (&r - r.transpose()).norm() > symmetric_tolerance(&r) || r.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidSpec(format!("R is not symmetric at t = {t}")));
        }
        if min_eigenvalue(&r) < -symmetric_tolerance(&r) {
            return Err(Error::InvalidSpec(format!("R is not nonnegative definite at t = {t}")));
        }
        if (&s - s.transpose()).norm() > symmetric_tolerance(&s) || s.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidSpec(format!("S is not symmetric at t = {t}")));
        }
        let lo = min_eigenvalue(&s);
        if !(lo > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "S is not positive definite at t = {t} (smallest eigenvalue {lo})"
            )));
        }
        s_min = s_min.min(lo);
    }
    Ok(QuadraticCost {
        spec,
        min_control_eigenvalue: s_min,
    })
}

impl QuadraticCost {
    /// Smallest eigenvalue of `S` over the validated nodes.
    pub fn strong_convexity(&self) -> f64 {
        self.min_control_eigenvalue
    }

    pub fn spec(&self) -> &QuadraticCostSpec {
        &self.spec
    }
}

impl Cost for QuadraticCost {
    fn state_dim(&self) -> usize {
        self.spec.h.state_dim()
    }

    fn control_dim(&self) -> usize {
        self.spec.control_dim
    }

    fn obs_dim(&self) -> usize {
        self.spec.h.obs_dim()
    }

    fn phi(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let h = self.spec.h.eval(t, x);
        0.5 * h.dot(&(self.spec.r.at(t) * &h)) + 0.5 * u.dot(&(self.spec.s.at(t) * u))
    }

    fn phi_x(&self, t: f64, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        let h = self.spec.h.eval(t, x);
        self.spec.h.jacobian(t, x).transpose() * (self.spec.r.at(t) * h)
    }

    fn phi_u(&self, t: f64, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.spec.s.at(t).transpose() * u
    }

    fn psi(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        -(self.spec.r.at(t).transpose() * self.spec.h.eval(t, x))
    }

    fn psi_x(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        -(self.spec.r.at(t).transpose() * self.spec.h.jacobian(t, x))
    }

    fn psi_t(&self, t: f64, x: &DVector<f64>) -> Option<DVector<f64>> {
        let r_dot = self.spec.r.derivative_at(t)?;
        let h = self.spec.h.eval(t, x);
        let h_t = self.spec.h.time_derivative(t, x);
        Some(-(r_dot.transpose() * h) - self.spec.r.at(t).transpose() * h_t)
    }

    fn control_hessian(&self, t: f64) -> Option<DMatrix<f64>> {
        Some(self.spec.s.at(t))
    }
}

type DivergenceFn = Arc<dyn Fn(f64, &DVector<f64>) -> f64 + Send + Sync>;

/// Onsager–Machlup running cost for a diffusion with constant `g`.
#[derive(Clone)]
pub struct OnsagerMachlupSpec {
    /// Supplies `h` and `R`; its `S` is replaced by `Gamma = (g g^T)^{-1}`.
    pub base: QuadraticCostSpec,
    pub model: Arc<dyn Model>,
    /// `div f(t, x)`; the trace of `D_x f` when absent.
    pub div_f: Option<DivergenceFn>,
}

/// `phi = h^T R h / 2 + u^T Gamma u / 2 - div f`, `psi = -h^T R`.
///
/// The curvature correction vanishes because `g` is constant.
#[derive(Clone)]
pub struct OnsagerMachlupCost {
    quadratic: QuadraticCost,
    gamma: DMatrix<f64>,
    div_f: DivergenceFn,
}

const GAMMA_MAX_CONDITION: f64 = 1e8;

pub fn build_onsager_machlup(spec: OnsagerMachlupSpec, grid: &TimeGrid) -> Result<OnsagerMachlupCost> {
    let model = spec.model.clone();
    let n = model.state_dim();
    let m = model.control_dim();
    if n != m {
        return Err(Error::UnsupportedCost(format!(
            "Onsager–Machlup needs a square g, model has n = {n}, m = {m}"
        )));
    }
    let g0 = model.control_matrix(0.0, &DVector::zeros(n));
    let mut rng = ChaCha8Rng::seed_from_u64(0x6f6d);
    for _ in 0..16 {
        let t = rng.random_range(0.0..=grid.horizon());
        let x = DVector::from_fn(n, |_, _| rng.random_range(-10.0..10.0));
        if (model.control_matrix(t, &x) - &g0).norm() > 1e-12 * g0.norm().max(1.0) {
            return Err(Error::UnsupportedCost(
                "Onsager–Machlup is implemented for constant g only".into(),
            ));
        }
    }
    let ggt = &g0 * g0.transpose();
    let eig = SymmetricEigen::new(ggt.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 0.0) || hi / lo >= GAMMA_MAX_CONDITION {
        return Err(Error::InvalidSpec(format!(
            "g g^T is singular or ill-conditioned (eigenvalues {lo:e} .. {hi:e})"
        )));
    }
    let gamma = ggt
        .try_inverse()
        .ok_or_else(|| Error::InvalidSpec("g g^T is not invertible".into()))?;
    let gamma = (&gamma + gamma.transpose()) * 0.5;

    let mut base = spec.base;
    base.control_dim = m;
    base.s = MatrixFn::Constant(gamma.clone());
    let quadratic = build_minimum_energy(base, grid)?;

    let div_f: DivergenceFn = match spec.div_f {
        Some(f) => f,
        None => Arc::new(move |t, x| model.drift_jacobian(t, x).trace()),
    };
    Ok(OnsagerMachlupCost {
        quadratic,
        gamma,
        div_f,
    })
}

impl OnsagerMachlupCost {
    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn divergence(&self, t: f64, x: &DVector<f64>) -> f64 {
        (self.div_f)(t, x)
    }

    /// Central differences of `div f`; exact zero when it is constant.
    fn divergence_gradient(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |k, _| {
            let h = 1e-6 * (1.0 + x[k].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            ((self.div_f)(t, &xp) - (self.div_f)(t, &xm)) / (2.0 * h)
        })
    }
}

impl Cost for OnsagerMachlupCost {
    fn state_dim(&self) -> usize {
        self.quadratic.state_dim()
    }

    fn control_dim(&self) -> usize {
        self.quadratic.control_dim()
    }

    fn obs_dim(&self) -> usize {
        self.quadratic.obs_dim()
    }

    fn phi(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.quadratic.phi(t, x, u) - (self.div_f)(t, x)
    }

    fn phi_x(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.quadratic.phi_x(t, x, u) - self.divergence_gradient(t, x)
    }

    fn phi_u(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.quadratic.phi_u(t, x, u)
    }

    fn psi(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self.quadratic.psi(t, x)
    }

    fn psi_x(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        self.quadratic.psi_x(t, x)
    }

    fn psi_t(&self, t: f64, x: &DVector<f64>) -> Option<DVector<f64>> {
        self.quadratic.psi_t(t, x)
    }

    fn control_hessian(&self, _t: f64) -> Option<DMatrix<f64>> {
        Some(self.gamma.clone())
    }
}

/// Largest scaled gap `|D - D_fd| / max(|D|, 1)` between the analytic
/// derivatives `D_x phi`, `D_u phi`, `D_x psi` (and `D_t psi` when present)
/// and central finite differences.
pub fn cost_fd_error(cost: &dyn Cost, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
    let scaled = |a: f64, b: f64| a / b.max(1.0);
    let step = |v: f64| 1e-6 * (1.0 + v.abs());
    let n = x.len();
    let m = u.len();
    let d = cost.obs_dim();

    let px = cost.phi_x(t, x, u);
    let fd_px = DVector::from_fn(n, |k, _| {
        let h = step(x[k]);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        (cost.phi(t, &xp, u) - cost.phi(t, &xm, u)) / (2.0 * h)
    });
    let pu = cost.phi_u(t, x, u);
    let fd_pu = DVector::from_fn(m, |k, _| {
        let h = step(u[k]);
        let mut up = u.clone();
        let mut um = u.clone();
        up[k] += h;
        um[k] -= h;
        (cost.phi(t, x, &up) - cost.phi(t, x, &um)) / (2.0 * h)
    });
    let sx = cost.psi_x(t, x);
    let mut fd_sx = DMatrix::zeros(d, n);
    for k in 0..n {
        let h = step(x[k]);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        fd_sx.set_column(k, &((cost.psi(t, &xp) - cost.psi(t, &xm)) / (2.0 * h)));
    }
    let mut worst = scaled((&px - fd_px).norm(), px.norm())
        .max(scaled((&pu - fd_pu).norm(), pu.norm()))
        .max(scaled((&sx - fd_sx).norm(), sx.norm()));
    if let Some(st) = cost.psi_t(t, x) {
        let h = step(t);
        let fd = (cost.psi(t + h, x) - cost.psi(t - h, x)) / (2.0 * h);
        worst = worst.max(scaled((&st - fd).norm(), st.norm()));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{integrate_state, Lorenz63, Lorenz63Params};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn lorenz_spec(r: f64) -> QuadraticCostSpec {
        QuadraticCostSpec {
            h: Arc::new(CoordinateProjection::new(vec![0], 3).unwrap()),
            r: MatrixFn::Constant(DMatrix::from_element(1, 1, r)),
            s: MatrixFn::Constant(DMatrix::identity(3, 3)),
            control_dim: 3,
        }
    }

    fn grid() -> TimeGrid {
        TimeGrid::new(1.0, 16).unwrap()
    }

    #[test]
    fn lorenz_minimum_energy_running_costs() {
        let c = build_minimum_energy(lorenz_spec(1.0), &grid()).unwrap();
        let x = v(&[2.0, -1.0, 5.0]);
        let u = v(&[1.0, 2.0, -2.0]);
        assert!((c.phi(0.3, &x, &u) - (0.5 * 4.0 + 0.5 * 9.0)).abs() < 1e-14);
        assert_eq!(c.psi(0.3, &x), v(&[-2.0]));
        assert_eq!(c.psi_x(0.3, &x), DMatrix::from_row_slice(1, 3, &[-1.0, 0.0, 0.0]));
    }

    #[test]
    fn zero_weight_switches_observation_off() {
        let c = build_minimum_energy(lorenz_spec(0.0), &grid()).unwrap();
        let x = v(&[2.0, -1.0, 5.0]);
        let u = v(&[1.0, 0.0, 1.0]);
        assert_eq!(c.psi(0.0, &x), v(&[0.0]));
        assert!((c.phi(0.0, &x, &u) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut spec = lorenz_spec(1.0);
        spec.h = Arc::new(CoordinateProjection::full(3));
        spec.r = MatrixFn::Constant(DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.1, 0.0, 0.1, 3.0]));
        spec.s = MatrixFn::TimeVarying {
            value: Arc::new(|t| DMatrix::from_row_slice(3, 3, &[2.0 + t, 0.3, 0.0, 0.3, 1.0, 0.0, 0.0, 0.0, 1.5])),
            derivative: None,
        };
        let c = build_minimum_energy(spec, &grid()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-5.0..5.0));
            let u = DVector::from_fn(3, |_, _| rng.random_range(-5.0..5.0));
            let err = cost_fd_error(&c, rng.random_range(0.0..1.0), &x, &u);
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn phi_is_convex_in_control() {
        let c = build_minimum_energy(lorenz_spec(1.0), &grid()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-5.0..5.0));
            let a = DVector::from_fn(3, |_, _| rng.random_range(-5.0..5.0));
            let b = DVector::from_fn(3, |_, _| rng.random_range(-5.0..5.0));
            let mid = c.phi(0.0, &x, &((&a + &b) * 0.5));
            assert!(mid <= 0.5 * (c.phi(0.0, &x, &a) + c.phi(0.0, &x, &b)) + 1e-10);
        }
    }

    #[test]
    fn rejects_indefinite_control_weight() {
        let mut spec = lorenz_spec(1.0);
        spec.s = MatrixFn::Constant(DMatrix::from_diagonal(&v(&[1.0, 0.0, 1.0])));
        assert!(matches!(build_minimum_energy(spec, &grid()), Err(Error::InvalidSpec(_))));
        let mut spec = lorenz_spec(1.0);
        spec.r = MatrixFn::Constant(DMatrix::from_element(1, 1, -1.0));
        assert!(build_minimum_energy(spec, &grid()).is_err());
    }

    #[test]
    fn pure_control_penalty_integrates_exactly() {
        let g = TimeGrid::new(1.0, 7).unwrap();
        let c = build_minimum_energy(lorenz_spec(0.0), &g).unwrap();
        let x = SampledPath::from_fn(g, |t| v(&[t, t * t, 1.0])).unwrap();
        let u = ControlPath::constant(g, v(&[1.0, 0.0, 0.0])).unwrap();
        let eta = SampledPath::from_fn(g, |t| v(&[t.sin()])).unwrap();
        assert!((eval_cost(&c, &x, &u, &eta).unwrap() - 0.5).abs() < 1e-15);
    }

    /// `phi = 0`, `psi = c`.
    struct ConstantPsi(DVector<f64>);

    impl Cost for ConstantPsi {
        fn state_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn obs_dim(&self) -> usize {
            self.0.len()
        }
        fn phi(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> f64 {
            0.0
        }
        fn phi_x(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(1)
        }
        fn phi_u(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(1)
        }
        fn psi(&self, _t: f64, _x: &DVector<f64>) -> DVector<f64> {
            self.0.clone()
        }
        fn psi_x(&self, _t: f64, _x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::zeros(self.0.len(), 1)
        }
        fn psi_t(&self, _t: f64, _x: &DVector<f64>) -> Option<DVector<f64>> {
            Some(DVector::zeros(self.0.len()))
        }
    }

    #[test]
    fn constant_psi_telescopes_in_both_evaluators() {
        let g = TimeGrid::new(1.0, 50).unwrap();
        let c = ConstantPsi(v(&[2.0, -1.0]));
        let model = crate::dynamics::LinearModel::scalar(-0.5);
        let u = ControlPath::constant(g, v(&[0.2])).unwrap();
        let x = integrate_state(&model, &u, &v(&[1.0])).unwrap();
        let eta = crate::roughpath::sample_wiener(g, 2, 4);
        let expected = c.0.dot(&(eta.last() - eta.first()));
        let direct = eval_cost(&c, &x, &u, &eta).unwrap();
        let parts = eval_cost_by_parts(&c, &model, &x, &u, &eta).unwrap();
        assert!((direct - expected).abs() < 1e-13);
        assert!((parts - expected).abs() < 1e-13);
    }

    #[test]
    fn by_parts_without_observation_term_matches_exactly() {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let c = build_minimum_energy(lorenz_spec(0.0), &g).unwrap();
        let m = Lorenz63::new(Lorenz63Params::default()).unwrap();
        let u = ControlPath::constant(g, v(&[1.0, -1.0, 0.5])).unwrap();
        let x = integrate_state(&m, &u, &v(&[1.0, 1.0, -20.0])).unwrap();
        let eta = crate::roughpath::sample_wiener(g, 1, 1);
        assert_eq!(
            eval_cost(&c, &x, &u, &eta).unwrap(),
            eval_cost_by_parts(&c, &m, &x, &u, &eta).unwrap()
        );
    }

    #[test]
    fn by_parts_needs_time_derivative() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let mut spec = lorenz_spec(1.0);
        spec.r = MatrixFn::TimeVarying {
            value: Arc::new(|_| DMatrix::from_element(1, 1, 1.0)),
            derivative: None,
        };
        let c = build_minimum_energy(spec, &g).unwrap();
        let m = Lorenz63::new(Lorenz63Params::default()).unwrap();
        let u = ControlPath::zeros(g, 3);
        let x = integrate_state(&m, &u, &v(&[1.0, 1.0, -20.0])).unwrap();
        let eta = SampledPath::zeros(g, 1);
        assert!(matches!(
            eval_cost_by_parts(&c, &m, &x, &u, &eta),
            Err(Error::UnsupportedCost(_))
        ));
    }

    #[test]
    fn onsager_machlup_adds_lorenz_divergence() {
        let g = grid();
        let p = Lorenz63Params::default();
        let model = Arc::new(Lorenz63::new(p).unwrap());
        let me = build_minimum_energy(lorenz_spec(1.0), &g).unwrap();
        let om = build_onsager_machlup(
            OnsagerMachlupSpec {
                base: lorenz_spec(1.0),
                model,
                div_f: None,
            },
            &g,
        )
        .unwrap();
        assert_eq!(om.gamma(), &DMatrix::identity(3, 3));
        let x = v(&[3.0, -2.0, -17.0]);
        let u = v(&[0.5, 1.0, -1.0]);
        let gap = om.phi(0.0, &x, &u) - me.phi(0.0, &x, &u);
        assert!((gap - (10.0 + 1.0 + 8.0 / 3.0)).abs() < 1e-12, "{gap}");
        assert!((om.divergence(0.0, &x) + 13.0 + 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(om.phi_x(0.0, &x, &u), me.phi_x(0.0, &x, &u));
    }

    #[test]
    fn onsager_machlup_with_zero_divergence_is_minimum_energy() {
        let g = grid();
        let model = Arc::new(Lorenz63::new(Lorenz63Params::default()).unwrap());
        let me = build_minimum_energy(lorenz_spec(1.0), &g).unwrap();
        let om = build_onsager_machlup(
            OnsagerMachlupSpec {
                base: lorenz_spec(1.0),
                model,
                div_f: Some(Arc::new(|_, _| 0.0)),
            },
            &g,
        )
        .unwrap();
        let x = v(&[1.0, 2.0, 3.0]);
        let u = v(&[-1.0, 0.0, 4.0]);
        assert_eq!(om.phi(0.2, &x, &u), me.phi(0.2, &x, &u));
    }

    #[test]
    fn onsager_machlup_rejects_state_dependent_gain() {
        struct Gain;
        impl Model for Gain {
            fn name(&self) -> &str {
                "gain"
            }
            fn state_dim(&self) -> usize {
                1
            }
            fn control_dim(&self) -> usize {
                1
            }
            fn drift(&self, _t: f64, x: &DVector<f64>) -> DVector<f64> {
                -x
            }
            fn control_matrix(&self, _t: f64, x: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::from_element(1, 1, 1.0 + x[0] * x[0])
            }
            fn drift_jacobian(&self, _t: f64, _x: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::from_element(1, 1, -1.0)
            }
            fn control_matrix_jacobian(&self, _t: f64, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
                vec![DMatrix::from_element(1, 1, 2.0 * x[0])]
            }
        }
        let spec = QuadraticCostSpec {
            h: Arc::new(CoordinateProjection::full(1)),
            r: MatrixFn::Constant(DMatrix::identity(1, 1)),
            s: MatrixFn::Constant(DMatrix::identity(1, 1)),
            control_dim: 1,
        };
        let res = build_onsager_machlup(
            OnsagerMachlupSpec {
                base: spec,
                model: Arc::new(Gain),
                div_f: None,
            },
            &grid(),
        );
        assert!(matches!(res, Err(Error::UnsupportedCost(_))));
    }
}
