//! Costate, Hamiltonian and first-order optimality.
//!
//! The costate solves the backward integral equation
//!
//! `lambda(t) = int_t^T lambda M ds + int_t^T D_x phi ds + int_t^T D_x psi d eta`
//!
//! with `M = D_x f + (D_x g) u` and `lambda(T) = 0`. On the grid the Young
//! term is left-tagged, so `lambda` jumps by
//! `D_x psi(t_i, x_i)^T (eta_{i+1} - eta_i)` at `t_i`; between nodes the
//! smooth part is stepped backwards with RK4, the state at the half step
//! coming from cubic Hermite interpolation. [`Costate`] keeps the node values
//! `lambda(t_i)`, the right limits `lambda(t_i+)` and interval midpoints.
//!
//! Controls live on intervals, so optimality is tested per interval with the
//! interval Hamiltonian `H_i(v)`, the Simpson average of
//! `H(t, x(t), lambda(t), v)` over `[t_i, t_{i+1}]`. Its `v`-derivative at
//! `u_i` is the gradient of the discretised cost with respect to the interval
//! value (per unit `dt`) up to `O(dt^4)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cost::Cost;
use crate::dynamics::{state_jacobian, velocity, ControlPath, Model};
use crate::optimizer::ControlSet;
use crate::roughpath::{young_integral, MatrixPath, SampledPath, Tag};
use crate::{Error, Result};

/// Costate node values `lambda(t_i)`, right limits `lambda(t_i+)` and
/// midpoint values `lambda(t_i + dt/2)`, together with the state midpoints
/// the recursion was run with.
#[derive(Debug, Clone, PartialEq)]
pub struct Costate {
    path: SampledPath,
    right_limits: Vec<DVector<f64>>,
    midpoints: Vec<DVector<f64>>,
    state_midpoints: Vec<DVector<f64>>,
}

impl Costate {
    /// `right_limits` has one entry per node (the last equals the terminal
    /// value), the midpoint vectors one per interval.
    pub fn from_parts(
        path: SampledPath,
        right_limits: Vec<DVector<f64>>,
        midpoints: Vec<DVector<f64>>,
        state_midpoints: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let dim = path.dim();
        if right_limits.len() != path.len()
            || midpoints.len() + 1 != path.len()
            || state_midpoints.len() != midpoints.len()
            || right_limits.iter().chain(&midpoints).chain(&state_midpoints).any(|v| v.len() != dim)
        {
            return Err(Error::Dimension("right limits and midpoints must match the costate path".into()));
        }
        Ok(Self {
            path,
            right_limits,
            midpoints,
            state_midpoints,
        })
    }

    pub fn path(&self) -> &SampledPath {
        &self.path
    }

    pub fn value(&self, i: usize) -> &DVector<f64> {
        self.path.value(i)
    }

    pub fn right_limit(&self, i: usize) -> &DVector<f64> {
        &self.right_limits[i]
    }

    pub fn midpoint(&self, i: usize) -> &DVector<f64> {
        &self.midpoints[i]
    }

    pub fn state_midpoint(&self, i: usize) -> &DVector<f64> {
        &self.state_midpoints[i]
    }

    pub fn initial(&self) -> &DVector<f64> {
        self.path.first()
    }

    pub fn terminal(&self) -> &DVector<f64> {
        self.path.last()
    }
}

/// State, control and costate on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalTriple {
    pub x: SampledPath,
    pub u: ControlPath,
    pub lambda: Costate,
}

/// `D_x psi(t_i, x_i)^T (eta_{i+1} - eta_i)`.
pub fn young_jump(cost: &dyn Cost, x: &SampledPath, eta: &SampledPath, i: usize) -> DVector<f64> {
    let t = x.grid().time(i);
    cost.psi_x(t, x.value(i)).transpose() * eta.increment(i)
}

/// Cubic Hermite value at the middle of a step of length `dt`.
pub(crate) fn hermite_mid(
    a: &DVector<f64>,
    da: &DVector<f64>,
    b: &DVector<f64>,
    db: &DVector<f64>,
    dt: f64,
) -> DVector<f64> {
    (a + b) * 0.5 + (da - db) * (dt / 8.0)
}

/// State at `t_i + dt/2` by Hermite interpolation with the interval control.
pub fn state_midpoint(model: &dyn Model, x: &SampledPath, u: &ControlPath, i: usize) -> DVector<f64> {
    let grid = x.grid();
    let ui = u.interval(i);
    let (t0, t1) = (grid.time(i), grid.time(i + 1));
    let (x0, x1) = (x.value(i), x.value(i + 1));
    hermite_mid(
        x0,
        &velocity(model, t0, x0, ui),
        x1,
        &velocity(model, t1, x1, ui),
        grid.dt(),
    )
}

/// Backward costate recursion from `lambda(T) = 0`.
pub fn solve_costate(
    model: &dyn Model,
    cost: &dyn Cost,
    x: &SampledPath,
    u: &ControlPath,
    eta: &SampledPath,
) -> Result<Costate> {
    x.grid().ensure_same(u.grid(), "costate state/control")?;
    x.grid().ensure_same(eta.grid(), "costate state/observation")?;
    let grid = *x.grid();
    let n_steps = grid.n_steps();
    let n = model.state_dim();
    let dt = grid.dt();

    // -lambda' = lambda M + D_x phi, written for column vectors.
    let rate = |t: f64, xs: &DVector<f64>, us: &DVector<f64>, lam: &DVector<f64>| {
        state_jacobian(model, t, xs, us).transpose() * lam + cost.phi_x(t, xs, us)
    };

    let mut nodes = vec![DVector::zeros(n); n_steps + 1];
    let mut right = vec![DVector::zeros(n); n_steps + 1];
    let mut mids = vec![DVector::zeros(n); n_steps];
    let mut xmids = vec![DVector::zeros(n); n_steps];
    for i in (0..n_steps).rev() {
        let ui = u.interval(i);
        let (t0, t1) = (grid.time(i), grid.time(i + 1));
        let tm = t0 + 0.5 * dt;
        let (x0, x1) = (x.value(i), x.value(i + 1));
        let xm = state_midpoint(model, x, u, i);
        let l1 = &nodes[i + 1];
        let k1 = rate(t1, x1, ui, l1);
        let k2 = rate(tm, &xm, ui, &(l1 + &k1 * (0.5 * dt)));
        let k3 = rate(tm, &xm, ui, &(l1 + &k2 * (0.5 * dt)));
        let k4 = rate(t0, x0, ui, &(l1 + &k3 * dt));
        let plus = l1 + (&k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        let k0 = rate(t0, x0, ui, &plus);
        // Costate time derivatives are -k0 and -k1.
        mids[i] = hermite_mid(&plus, &(-k0), l1, &(-k1), dt);
        let node = &plus + young_jump(cost, x, eta, i);
        if node.iter().any(|c| !c.is_finite()) {
            return Err(Error::BlowUp { what: "costate", node: i });
        }
        right[i] = plus;
        nodes[i] = node;
        xmids[i] = xm;
    }
    Ok(Costate {
        path: SampledPath::from_parts_unchecked(grid, n, nodes),
        right_limits: right,
        midpoints: mids,
        state_midpoints: xmids,
    })
}

/// `H(t, x, lambda, v) = phi(t, x, v) + lambda . (f(t, x) + g(t, x) v)`.
pub fn hamiltonian(
    cost: &dyn Cost,
    model: &dyn Model,
    t: f64,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    v: &DVector<f64>,
) -> f64 {
    cost.phi(t, x, v) + lambda.dot(&velocity(model, t, x, v))
}

/// Simpson nodes of interval `i`: `(weight, t, x, lambda)`.
fn simpson_nodes<'a>(
    x: &'a SampledPath,
    lambda: &'a Costate,
    i: usize,
) -> [(f64, f64, &'a DVector<f64>, &'a DVector<f64>); 3] {
    let grid = x.grid();
    let (t0, t1) = (grid.time(i), grid.time(i + 1));
    [
        (1.0 / 6.0, t0, x.value(i), lambda.right_limit(i)),
        (4.0 / 6.0, 0.5 * (t0 + t1), lambda.state_midpoint(i), lambda.midpoint(i)),
        (1.0 / 6.0, t1, x.value(i + 1), lambda.value(i + 1)),
    ]
}

/// Simpson average of `H(t, x(t), lambda(t), v)` over `[t_i, t_{i+1}]`,
/// along the stored state and costate (including their midpoints).
pub fn interval_hamiltonian(
    cost: &dyn Cost,
    model: &dyn Model,
    triple: &OptimalTriple,
    i: usize,
    v: &DVector<f64>,
) -> f64 {
    simpson_nodes(&triple.x, &triple.lambda, i)
        .iter()
        .map(|(w, t, xs, lam)| w * hamiltonian(cost, model, *t, xs, lam, v))
        .sum()
}

/// `d/dv` of the interval Hamiltonian at each interval's control value: the
/// `L_2` gradient of the discretised cost with respect to the piecewise
/// constant control. The final node repeats the last interval.
pub fn control_gradient(
    model: &dyn Model,
    cost: &dyn Cost,
    x: &SampledPath,
    u: &ControlPath,
    lambda: &Costate,
) -> Result<SampledPath> {
    x.grid().ensure_same(u.grid(), "gradient state/control")?;
    x.grid().ensure_same(lambda.path.grid(), "gradient state/costate")?;
    let grid = *x.grid();
    let mut values = Vec::with_capacity(grid.n_nodes());
    for i in 0..grid.n_steps() {
        let ui = u.interval(i);
        let g = simpson_nodes(x, lambda, i)
            .iter()
            .map(|(w, t, xs, lam)| (cost.phi_u(*t, xs, ui) + model.control_matrix(*t, xs).transpose() * *lam) * *w)
            .fold(DVector::zeros(u.dim()), |acc, term| acc + term);
        values.push(g);
    }
    values.push(values[values.len() - 1].clone());
    Ok(SampledPath::from_parts_unchecked(grid, u.dim(), values))
}

/// Exact gradient of the discretised cost (RK4 forward map, trapezoid running
/// cost, left-point Young sum) with respect to the interval control values,
/// divided by `dt` so that it is directly comparable with
/// [`control_gradient`]. Computed in reverse mode through the RK4 stages.
pub fn discrete_gradient(
    model: &dyn Model,
    cost: &dyn Cost,
    x: &SampledPath,
    u: &ControlPath,
    eta: &SampledPath,
) -> Result<SampledPath> {
    x.grid().ensure_same(u.grid(), "gradient state/control")?;
    x.grid().ensure_same(eta.grid(), "gradient state/observation")?;
    let grid = *x.grid();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let direct_x = |k: usize| {
        let t = grid.time(k);
        let xk = x.value(k);
        let mut d = DVector::zeros(xk.len());
        if k < n_steps {
            d += cost.phi_x(t, xk, u.interval(k)) * (0.5 * dt) + young_jump(cost, x, eta, k);
        }
        if k > 0 {
            d += cost.phi_x(t, xk, u.interval(k - 1)) * (0.5 * dt);
        }
        d
    };
    let mut values = vec![DVector::zeros(u.dim()); grid.n_nodes()];
    let mut adj = direct_x(n_steps);
    for i in (0..n_steps).rev() {
        let ui = u.interval(i);
        let (t0, t1) = (grid.time(i), grid.time(i + 1));
        let (xbar, ubar) = crate::dynamics::rk4_step_adjoint(model, t0, dt, x.value(i), ui, &adj);
        let direct_u = (cost.phi_u(t0, x.value(i), ui) + cost.phi_u(t1, x.value(i + 1), ui)) * (0.5 * dt);
        values[i] = (ubar + direct_u) / dt;
        adj = xbar + direct_x(i);
        if adj.iter().any(|c| !c.is_finite()) {
            return Err(Error::BlowUp { what: "discrete adjoint", node: i });
        }
    }
    values[n_steps] = values[n_steps - 1].clone();
    Ok(SampledPath::from_parts_unchecked(grid, u.dim(), values))
}

/// Minimiser over `U` of `v^T S v / 2 + b . v` for symmetric positive
/// definite `S`.
///
/// Unconstrained, or when `S` is a multiple of the identity, this is the
/// Euclidean projection of `-S^{-1} b`; otherwise a projected-gradient inner
/// solve with step `1 / lambda_max(S)`.
pub fn minimize_quadratic(s: &DMatrix<f64>, b: &DVector<f64>, set: &ControlSet) -> Option<DVector<f64>> {
    let free = s.clone().cholesky()?.solve(&(-b));
    let scale = s[(0, 0)];
    let isotropic = (s - DMatrix::identity(s.nrows(), s.ncols()) * scale).norm() <= 1e-14 * scale.abs().max(1.0);
    if matches!(set, ControlSet::AllSpace) || isotropic {
        return Some(set.project(&free));
    }
    let lmax = nalgebra::SymmetricEigen::new((s + s.transpose()) * 0.5).eigenvalues.max();
    let step = 1.0 / lmax;
    let mut v = set.project(&free);
    for _ in 0..10_000 {
        let next = set.project(&(&v - (s * &v + b) * step));
        let moved = (&next - &v).norm();
        v = next;
        if moved <= 1e-15 * (1.0 + v.norm()) {
            break;
        }
    }
    Some(v)
}

/// Closed-form minimiser of `H(t, x, lambda, .)` over `U` for costs that are
/// quadratic in the control: `Pi_U(-S^{-1} g^T lambda)` (exactly so when `U`
/// is the whole space or `S` is isotropic).
pub fn hamiltonian_minimizer(
    cost: &dyn Cost,
    model: &dyn Model,
    set: &ControlSet,
    t: f64,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
) -> Option<DVector<f64>> {
    let s = cost.control_hessian(t)?;
    let b = model.control_matrix(t, x).transpose() * lambda;
    minimize_quadratic(&s, &b, set)
}

/// Closed-form minimiser of the interval Hamiltonian `H_i` over `U`.
pub fn interval_minimizer(
    cost: &dyn Cost,
    model: &dyn Model,
    set: &ControlSet,
    x: &SampledPath,
    lambda: &Costate,
    i: usize,
) -> Option<DVector<f64>> {
    let m = cost.control_dim();
    let mut s = DMatrix::zeros(m, m);
    let mut b = DVector::zeros(m);
    for (w, t, xs, lam) in simpson_nodes(x, lambda, i).iter() {
        s += cost.control_hessian(*t)? * *w;
        b += model.control_matrix(*t, xs).transpose() * *lam * *w;
    }
    minimize_quadratic(&s, &b, set)
}

/// How the inner minimisation of the Hamiltonian is done.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    /// Closed form when the cost is quadratic in `u`, else 256 samples.
    Auto,
    /// Uniform samples of `U` within a ball of radius `10 (1 + |u_i|)`;
    /// a heuristic lower bound on the residual only.
    Samples(usize),
}

const DEFAULT_SAMPLES: usize = 256;

/// `max_i [H_i(u_i) - min_{v in U} H_i(v)]` over control intervals.
pub fn max_principle_residual(
    triple: &OptimalTriple,
    cost: &dyn Cost,
    model: &dyn Model,
    set: &ControlSet,
    probe: Probe,
) -> Result<f64> {
    let OptimalTriple { x, u, lambda } = triple;
    x.grid().ensure_same(u.grid(), "residual state/control")?;
    x.grid().ensure_same(lambda.path.grid(), "residual state/costate")?;
    let h = |i: usize, v: &DVector<f64>| interval_hamiltonian(cost, model, triple, i, v);
    let n_steps = x.grid().n_steps();
    let m = u.dim();
    let mut worst = 0.0_f64;
    for i in 0..n_steps {
        let ui = u.interval(i);
        let h_u = h(i, ui);
        let closed = match probe {
            Probe::Auto => interval_minimizer(cost, model, set, x, lambda, i),
            Probe::Samples(_) => None,
        };
        let h_min = match closed {
            Some(v) => h(i, &v),
            None => {
                let count = match probe {
                    Probe::Samples(k) => k,
                    Probe::Auto => DEFAULT_SAMPLES,
                };
                let radius = 10.0 * (1.0 + ui.norm());
                let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                (0..count)
                    .map(|_| {
                        let v = set.project(&sample_ball(&mut rng, m, radius));
                        h(i, &v)
                    })
                    .fold(h_u, f64::min)
            }
        };
        let gap = h_u - h_min;
        if !gap.is_finite() {
            return Err(Error::BlowUp {
                what: "Hamiltonian",
                node: i,
            });
        }
        worst = worst.max(gap);
    }
    Ok(worst.max(0.0))
}

fn sample_ball(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        if v.norm_squared() <= 1.0 {
            return v * radius;
        }
    }
}

/// Residual of the duality identity
///
/// `lambda(T) zeta(T) - lambda(0) zeta(0) = int zeta db + int lambda da`
///
/// for `zeta = zeta(0) + int_0^t M zeta + a(t) - a(0)` and
/// `lambda = lambda(T) + int_t^T lambda M + b(t) - b(T)`.
///
/// Both equations are stepped with the trapezoid rule (Crank–Nicolson) and
/// the Young integrals use piecewise-linear (midpoint) sums, which are exact
/// for piecewise-linear `a`, `b`; the residual is then `O(dt^2)` for smooth
/// `M` and vanishes to rounding when `M = 0`.
pub fn duality_check(
    m: &MatrixPath,
    a: &SampledPath,
    b: &SampledPath,
    zeta0: &DVector<f64>,
    lambda_t: &DVector<f64>,
) -> Result<f64> {
    let grid = *m.grid();
    grid.ensure_same(a.grid(), "duality M/a")?;
    grid.ensure_same(b.grid(), "duality M/b")?;
    let n = zeta0.len();
    if m.shape() != (n, n) || a.dim() != n || b.dim() != n || lambda_t.len() != n {
        return Err(Error::Dimension("duality inputs must share one dimension".into()));
    }
    let dt = grid.dt();
    let id = DMatrix::<f64>::identity(n, n);
    let n_steps = grid.n_steps();

    let mut zeta = Vec::with_capacity(grid.n_nodes());
    zeta.push(zeta0.clone());
    for i in 0..n_steps {
        let lhs = &id - m.value(i + 1) * (0.5 * dt);
        let rhs = (&id + m.value(i) * (0.5 * dt)) * &zeta[i] + a.increment(i);
        let next = lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::InvalidParameter("singular Crank–Nicolson step".into()))?;
        zeta.push(next);
    }

    let mut lambda = vec![DVector::zeros(n); grid.n_nodes()];
    lambda[n_steps] = lambda_t.clone();
    for i in (0..n_steps).rev() {
        let lhs = &id - m.value(i).transpose() * (0.5 * dt);
        let rhs = (&id + m.value(i + 1).transpose() * (0.5 * dt)) * &lambda[i + 1] - b.increment(i);
        lambda[i] = lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::InvalidParameter("singular Crank–Nicolson step".into()))?;
    }

    let zeta = SampledPath::new(grid, zeta)?;
    let lambda = SampledPath::new(grid, lambda)?;
    let zeta_db = young_integral(&MatrixPath::from_covectors(&zeta), b, Tag::Midpoint)?[0];
    let lambda_da = young_integral(&MatrixPath::from_covectors(&lambda), a, Tag::Midpoint)?[0];
    let boundary = lambda.last().dot(zeta.last()) - lambda.first().dot(zeta.first());
    Ok((boundary - zeta_db - lambda_da).abs())
}
