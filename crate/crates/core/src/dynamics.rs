//! Controlled state equation `x' = f(t, x) + g(t, x) u` and its integrators.
//!
//! Controls are piecewise constant: the value stored at node `i` acts on
//! `[t_i, t_{i+1})`. The value at the final node carries no interval; it is
//! kept equal to the last interval value so control files have one row per
//! node.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::roughpath::{SampledPath, TimeGrid};
use crate::{Error, Result};

/// Dynamics `(f, g)` with their state Jacobians.
pub trait Model: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    /// `f(t, x)`.
    fn drift(&self, t: f64, x: &DVector<f64>) -> DVector<f64>;

    /// `g(t, x)`, an `n x m` matrix.
    fn control_matrix(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64>;

    /// `D_x f(t, x)`, `n x n`.
    fn drift_jacobian(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64>;

    /// `D_x g(t, x)` as `n` slices: entry `k` is `dg/dx_k`, an `n x m` matrix.
    fn control_matrix_jacobian(&self, t: f64, x: &DVector<f64>) -> Vec<DMatrix<f64>>;

    /// True when `g` depends on neither `t` nor `x`.
    fn has_constant_control_matrix(&self) -> bool {
        false
    }

    /// The energy-conserving quadratic part `f_2` with `x . f_2(x) = 0`,
    /// for models that split that way.
    fn bilinear_part(&self, _x: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }
}

/// `f(t,x) + g(t,x) u`.
pub fn velocity(model: &dyn Model, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    model.drift(t, x) + model.control_matrix(t, x) * u
}

/// `M = D_x f + (D_x g) u`, the Jacobian of the closed-loop velocity for a
/// frozen control.
pub fn state_jacobian(model: &dyn Model, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
    let mut m = model.drift_jacobian(t, x);
    for (k, dg) in model.control_matrix_jacobian(t, x).iter().enumerate() {
        let col = dg * u;
        let mut mk = m.column_mut(k);
        mk += col;
    }
    m
}

/// Positive Lorenz'63 parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lorenz63Params {
    pub sigma: f64,
    pub r: f64,
    pub b: f64,
}

impl Default for Lorenz63Params {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            r: 28.0,
            b: 8.0 / 3.0,
        }
    }
}

/// Lorenz'63 in the shifted form `f = f_1 + f_2` with a linear stable part
///
/// `f_1 = (-s x + s y, -s x - y, -b z - b (r + s))`
///
/// and the energy-conserving quadratic part `f_2 = (0, -x z, x y)`.
/// The control enters through `g = I`.
#[derive(Debug, Clone)]
pub struct Lorenz63 {
    params: Lorenz63Params,
}

impl Lorenz63 {
    pub fn new(params: Lorenz63Params) -> Result<Self> {
        let Lorenz63Params { sigma, r, b } = params;
        if !(sigma > 0.0 && r > 0.0 && b > 0.0) || !(sigma.is_finite() && r.is_finite() && b.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "Lorenz'63 parameters must be positive, got sigma={sigma}, r={r}, b={b}"
            )));
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> Lorenz63Params {
        self.params
    }

    pub fn linear_part(&self, s: &DVector<f64>) -> DVector<f64> {
        let Lorenz63Params { sigma, r, b } = self.params;
        DVector::from_vec(vec![
            -sigma * s[0] + sigma * s[1],
            -sigma * s[0] - s[1],
            -b * s[2] - b * (r + sigma),
        ])
    }

    pub fn quadratic_part(&self, s: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![0.0, -s[0] * s[2], s[0] * s[1]])
    }

    /// `div f = -(sigma + 1 + b)`, independent of the state.
    pub fn divergence(&self) -> f64 {
        -(self.params.sigma + 1.0 + self.params.b)
    }
}

/// Uncontrolled Lorenz'63 drift `f_1 + f_2`.
pub fn lorenz63_drift(state: &DVector<f64>, params: Lorenz63Params) -> DVector<f64> {
    let m = Lorenz63 { params };
    m.linear_part(state) + m.quadratic_part(state)
}

impl Model for Lorenz63 {
    fn name(&self) -> &str {
        "lorenz63"
    }

    fn state_dim(&self) -> usize {
        3
    }

    fn control_dim(&self) -> usize {
        3
    }

    fn drift(&self, _t: f64, x: &DVector<f64>) -> DVector<f64> {
        lorenz63_drift(x, self.params)
    }

    fn control_matrix(&self, _t: f64, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(3, 3)
    }

    fn drift_jacobian(&self, _t: f64, s: &DVector<f64>) -> DMatrix<f64> {
        let Lorenz63Params { sigma, b, .. } = self.params;
        let (x, y, z) = (s[0], s[1], s[2]);
        DMatrix::from_row_slice(3, 3, &[-sigma, sigma, 0.0, -sigma - z, -1.0, -x, y, x, -b])
    }

    fn control_matrix_jacobian(&self, _t: f64, _x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(3, 3); 3]
    }

    fn has_constant_control_matrix(&self) -> bool {
        true
    }

    fn bilinear_part(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        Some(self.quadratic_part(x))
    }
}

/// Lorenz'96: `x_i' = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F`, cyclic
/// indices, `g = I`.
#[derive(Debug, Clone)]
pub struct Lorenz96 {
    dim: usize,
    forcing: f64,
}

impl Lorenz96 {
    pub fn new(dim: usize, forcing: f64) -> Result<Self> {
        if dim < 4 {
            return Err(Error::InvalidParameter(format!("Lorenz'96 needs dim >= 4, got {dim}")));
        }
        if !forcing.is_finite() {
            return Err(Error::InvalidParameter("Lorenz'96 forcing must be finite".into()));
        }
        Ok(Self { dim, forcing })
    }

    fn idx(&self, i: usize, offset: isize) -> usize {
        (i as isize + offset).rem_euclid(self.dim as isize) as usize
    }

    /// `div f = -dim`.
    pub fn divergence(&self) -> f64 {
        -(self.dim as f64)
    }
}

impl Model for Lorenz96 {
    fn name(&self) -> &str {
        "lorenz96"
    }

    fn state_dim(&self) -> usize {
        self.dim
    }

    fn control_dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, _t: f64, x: &DVector<f64>) -> DVector<f64> {
        let q = self.bilinear_part(x).unwrap();
        DVector::from_fn(self.dim, |i, _| q[i] - x[i] + self.forcing)
    }

    fn control_matrix(&self, _t: f64, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim)
    }

    fn drift_jacobian(&self, _t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim;
        let mut j = DMatrix::zeros(n, n);
        for i in 0..n {
            let (ip1, im1, im2) = (self.idx(i, 1), self.idx(i, -1), self.idx(i, -2));
            j[(i, ip1)] += x[im1];
            j[(i, im2)] -= x[im1];
            j[(i, im1)] += x[ip1] - x[im2];
            j[(i, i)] -= 1.0;
        }
        j
    }

    fn control_matrix_jacobian(&self, _t: f64, _x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(self.dim, self.dim); self.dim]
    }

    fn has_constant_control_matrix(&self) -> bool {
        true
    }

    fn bilinear_part(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        Some(DVector::from_fn(self.dim, |i, _| {
            (x[self.idx(i, 1)] - x[self.idx(i, -2)]) * x[self.idx(i, -1)]
        }))
    }
}

/// `x' = A x + c + B u`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DVector<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        Self::affine(a, b, DVector::zeros(n))
    }

    pub fn affine(a: DMatrix<f64>, b: DMatrix<f64>, c: DVector<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n || b.nrows() != n || b.ncols() == 0 || c.len() != n {
            return Err(Error::Dimension(format!(
                "linear model shapes A {:?}, B {:?}, c {}",
                a.shape(),
                b.shape(),
                c.len()
            )));
        }
        Ok(Self { a, b, c })
    }

    /// `x' = a x + u` in one dimension.
    pub fn scalar(a: f64) -> Self {
        Self {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, 1.0),
            c: DVector::zeros(1),
        }
    }
}

impl Model for LinearModel {
    fn name(&self) -> &str {
        "linear"
    }

    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn drift(&self, _t: f64, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.c
    }

    fn control_matrix(&self, _t: f64, _x: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }

    fn drift_jacobian(&self, _t: f64, _x: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }

    fn control_matrix_jacobian(&self, _t: f64, _x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(self.b.nrows(), self.b.ncols()); self.a.nrows()]
    }

    fn has_constant_control_matrix(&self) -> bool {
        true
    }
}

/// Piecewise-constant, left-sampled control.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath(SampledPath);

impl ControlPath {
    /// Wraps a path; the final node value is ignored by integrators and costs.
    pub fn new(path: SampledPath) -> Self {
        Self(path)
    }

    pub fn zeros(grid: TimeGrid, control_dim: usize) -> Self {
        Self(SampledPath::zeros(grid, control_dim))
    }

    pub fn constant(grid: TimeGrid, value: DVector<f64>) -> Result<Self> {
        Ok(Self(SampledPath::constant(grid, value)?))
    }

    /// Builds a control from its `n_steps` interval values; the final node
    /// repeats the last interval.
    pub fn from_intervals(grid: TimeGrid, mut values: Vec<DVector<f64>>) -> Result<Self> {
        if values.len() != grid.n_steps() {
            return Err(Error::Dimension(format!(
                "{} interval values for {} steps",
                values.len(),
                grid.n_steps()
            )));
        }
        values.push(values[values.len() - 1].clone());
        Ok(Self(SampledPath::new(grid, values)?))
    }

    pub fn path(&self) -> &SampledPath {
        &self.0
    }

    pub fn into_path(self) -> SampledPath {
        self.0
    }

    pub fn grid(&self) -> &TimeGrid {
        self.0.grid()
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    /// Value on `[t_i, t_{i+1})`.
    pub fn interval(&self, i: usize) -> &DVector<f64> {
        self.0.value(i)
    }

    pub fn intervals(&self) -> &[DVector<f64>] {
        let v = self.0.values();
        &v[..v.len() - 1]
    }

    /// `(int |u|^2 dt)^(1/2)` for the piecewise-constant control.
    pub fn l2_norm(&self) -> f64 {
        let dt = self.grid().dt();
        (self.intervals().iter().map(|v| v.norm_squared()).sum::<f64>() * dt).sqrt()
    }
}

/// Stage states, stage times and the resulting state of one RK4 step.
struct Rk4Step {
    stages: [DVector<f64>; 4],
    next: DVector<f64>,
}

fn rk4_step(model: &dyn Model, t: f64, dt: f64, x: &DVector<f64>, u: &DVector<f64>) -> Rk4Step {
    let h2 = 0.5 * dt;
    let x1 = x.clone();
    let k1 = velocity(model, t, &x1, u);
    let x2 = x + &k1 * h2;
    let k2 = velocity(model, t + h2, &x2, u);
    let x3 = x + &k2 * h2;
    let k3 = velocity(model, t + h2, &x3, u);
    let x4 = x + &k3 * dt;
    let k4 = velocity(model, t + dt, &x4, u);
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    Rk4Step {
        stages: [x1, x2, x3, x4],
        next,
    }
}

/// Reverse-mode derivative of one RK4 step: given `a = dJ/dx_{i+1}`, returns
/// `(a^T dx_{i+1}/dx_i, a^T dx_{i+1}/du_i)` as column vectors.
pub(crate) fn rk4_step_adjoint(
    model: &dyn Model,
    t: f64,
    dt: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    a: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let h2 = 0.5 * dt;
    let step = rk4_step(model, t, dt, x, u);
    let times = [t, t + h2, t + h2, t + dt];
    let feeds = [h2, h2, dt];
    let mut kbar = [a * (dt / 6.0), a * (dt / 3.0), a * (dt / 3.0), a * (dt / 6.0)];
    let mut xbar = a.clone();
    let mut ubar = DVector::zeros(u.len());
    for s in (0..4).rev() {
        let y = &step.stages[s];
        ubar += model.control_matrix(times[s], y).transpose() * &kbar[s];
        let ybar = state_jacobian(model, times[s], y, u).transpose() * &kbar[s];
        if s > 0 {
            kbar[s - 1] += &ybar * feeds[s - 1];
        }
        xbar += ybar;
    }
    (xbar, ubar)
}

fn check_dims(model: &dyn Model, u: &ControlPath, xi: &DVector<f64>) -> Result<()> {
    if u.dim() != model.control_dim() {
        return Err(Error::Dimension(format!(
            "control has dimension {}, model expects {}",
            u.dim(),
            model.control_dim()
        )));
    }
    if xi.len() != model.state_dim() {
        return Err(Error::Dimension(format!(
            "initial state has dimension {}, model expects {}",
            xi.len(),
            model.state_dim()
        )));
    }
    Ok(())
}

/// Classical RK4 with the control frozen at its left value on each step.
pub fn integrate_state(model: &dyn Model, u: &ControlPath, xi: &DVector<f64>) -> Result<SampledPath> {
    check_dims(model, u, xi)?;
    if xi.iter().any(|c| !c.is_finite()) {
        return Err(Error::BlowUp { what: "state", node: 0 });
    }
    let grid = *u.grid();
    let dt = grid.dt();
    let mut values = Vec::with_capacity(grid.n_nodes());
    values.push(xi.clone());
    for i in 0..grid.n_steps() {
        let step = rk4_step(model, grid.time(i), dt, &values[i], u.interval(i));
        if step.next.iter().any(|c| !c.is_finite()) {
            return Err(Error::BlowUp {
                what: "state",
                node: i + 1,
            });
        }
        values.push(step.next);
    }
    Ok(SampledPath::from_parts_unchecked(grid, model.state_dim(), values))
}

/// Linearised state equation `v' = M(t) v + forcing(t)`, `v(0) = v0`, along
/// the trajectory `x` driven by `u`.
///
/// Each step differentiates the RK4 stages of [`integrate_state`], so with zero
/// forcing the result is the exact derivative of the discrete flow with
/// respect to the initial state in direction `v0`. Forcing is sampled at the
/// stage times, midpoint values by linear interpolation.
pub fn integrate_variation(
    model: &dyn Model,
    x: &SampledPath,
    u: &ControlPath,
    v0: &DVector<f64>,
    forcing: Option<&SampledPath>,
) -> Result<SampledPath> {
    check_dims(model, u, v0)?;
    x.grid().ensure_same(u.grid(), "integrate_variation state/control")?;
    if let Some(f) = forcing {
        x.grid().ensure_same(f.grid(), "integrate_variation forcing")?;
        if f.dim() != model.state_dim() {
            return Err(Error::Dimension("forcing must have the state dimension".into()));
        }
    }
    let grid = *x.grid();
    let dt = grid.dt();
    let h2 = 0.5 * dt;
    let n = model.state_dim();
    let mut values = Vec::with_capacity(grid.n_nodes());
    values.push(v0.clone());
    for i in 0..grid.n_steps() {
        let t = grid.time(i);
        let ui = u.interval(i);
        let step = rk4_step(model, t, dt, x.value(i), ui);
        let (f0, fm, f1) = match forcing {
            Some(f) => (
                f.value(i).clone(),
                (f.value(i) + f.value(i + 1)) * 0.5,
                f.value(i + 1).clone(),
            ),
            None => (DVector::zeros(n), DVector::zeros(n), DVector::zeros(n)),
        };
        let v = &values[i];
        let [s1, s2, s3, s4] = &step.stages;
        let d1 = state_jacobian(model, t, s1, ui) * v + f0;
        let d2 = state_jacobian(model, t + h2, s2, ui) * (v + &d1 * h2) + &fm;
        let d3 = state_jacobian(model, t + h2, s3, ui) * (v + &d2 * h2) + &fm;
        let d4 = state_jacobian(model, t + dt, s4, ui) * (v + &d3 * dt) + f1;
        let next = v + (d1 + d2 * 2.0 + d3 * 2.0 + d4) * (dt / 6.0);
        if next.iter().any(|c| !c.is_finite()) {
            return Err(Error::BlowUp {
                what: "variation",
                node: i + 1,
            });
        }
        values.push(next);
    }
    Ok(SampledPath::from_parts_unchecked(grid, n, values))
}

/// Empirical growth ratios of a process against its control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyDiagnostic {
    /// `||x||_inf / (1 + ||u||_2)`.
    pub sup_ratio: f64,
    /// `||x'||_2 / (1 + ||u||_2^2)` with `x'` the per-step slope.
    pub nonlin_ratio: f64,
}

pub fn energy_diagnostic(x: &SampledPath, u: &ControlPath) -> Result<EnergyDiagnostic> {
    x.grid().ensure_same(u.grid(), "energy_diagnostic")?;
    let dt = x.grid().dt();
    let u2 = u.l2_norm();
    let slope2: f64 = (0..x.grid().n_steps())
        .map(|i| (x.increment(i) / dt).norm_squared() * dt)
        .sum();
    Ok(EnergyDiagnostic {
        sup_ratio: x.sup_norm() / (1.0 + u2),
        nonlin_ratio: slope2.sqrt() / (1.0 + u2 * u2),
    })
}

/// Largest scaled gap between the analytic Jacobians and central finite
/// differences at `(t, x)`: `|J - J_fd| / max(|J|, 1)` in the Frobenius norm,
/// over `D_x f` and every slice of `D_x g`.
pub fn jacobian_fd_error(model: &dyn Model, t: f64, x: &DVector<f64>) -> f64 {
    let n = model.state_dim();
    let jf = model.drift_jacobian(t, x);
    let jg = model.control_matrix_jacobian(t, x);
    let mut fd_f = DMatrix::zeros(n, n);
    let mut worst = 0.0_f64;
    for k in 0..n {
        let h = 1e-6 * (1.0 + x[k].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        let col = (model.drift(t, &xp) - model.drift(t, &xm)) / (2.0 * h);
        fd_f.set_column(k, &col);
        let fd_g = (model.control_matrix(t, &xp) - model.control_matrix(t, &xm)) / (2.0 * h);
        worst = worst.max((&jg[k] - &fd_g).norm() / jg[k].norm().max(1.0));
    }
    worst.max((&jf - fd_f).norm() / jf.norm().max(1.0))
}
