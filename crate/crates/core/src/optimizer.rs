//! Projected-gradient minimisation over piecewise-constant controls.
//!
//! Descent directions come from [`discrete_gradient`], the exact derivative
//! of the discretised cost, so the Armijo test on [`eval_cost`] stays
//! meaningful down to rounding. Optimality is certified separately through
//! the continuous costate: the final triple carries a freshly solved
//! [`Costate`] and the maximum-principle residual.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{discrete_gradient, max_principle_residual, solve_costate, OptimalTriple, Probe};
use crate::cost::eval_cost;
use crate::dynamics::{integrate_state, ControlPath};
use crate::roughpath::SampledPath;
use crate::{Error, Problem, Result};

/// Closed convex control set `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlSet {
    #[default]
    AllSpace,
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl ControlSet {
    pub fn boxed(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        let set = Self::Box {
            lo: lo.as_slice().to_vec(),
            hi: hi.as_slice().to_vec(),
        };
        set.validate(lo.len())?;
        Ok(set)
    }

    pub fn ball(center: DVector<f64>, radius: f64) -> Result<Self> {
        let set = Self::Ball {
            center: center.as_slice().to_vec(),
            radius,
        };
        set.validate(center.len())?;
        Ok(set)
    }

    /// Checks the invariants for controls of dimension `m`.
    pub fn validate(&self, m: usize) -> Result<()> {
        match self {
            Self::AllSpace => Ok(()),
            Self::Box { lo, hi } => {
                if lo.len() != m || hi.len() != m {
                    return Err(Error::Dimension(format!("box bounds must have length {m}")));
                }
                if lo.iter().zip(hi).any(|(l, h)| !(l <= h) || l.is_nan() || h.is_nan()) {
                    return Err(Error::InvalidParameter("box needs lo <= hi componentwise".into()));
                }
                Ok(())
            }
            Self::Ball { center, radius } => {
                if center.len() != m {
                    return Err(Error::Dimension(format!("ball center must have length {m}")));
                }
                if !(*radius > 0.0) || !radius.is_finite() || center.iter().any(|c| !c.is_finite()) {
                    return Err(Error::InvalidParameter("ball needs a finite center and radius > 0".into()));
                }
                Ok(())
            }
        }
    }

    /// Euclidean projection of one control value.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::AllSpace => v.clone(),
            Self::Box { lo, hi } => DVector::from_fn(v.len(), |i, _| v[i].clamp(lo[i], hi[i])),
            Self::Ball { center, radius } => {
                let c = DVector::from_column_slice(center);
                let d = v - &c;
                let norm = d.norm();
                // Slack keeps the projection idempotent under rounding.
                if norm <= *radius * (1.0 + 4.0 * f64::EPSILON) {
                    v.clone()
                } else {
                    c + d * (*radius / norm)
                }
            }
        }
    }

    pub fn contains(&self, v: &DVector<f64>, slack: f64) -> bool {
        (self.project(v) - v).amax() <= slack
    }
}

/// Pointwise projection of a control path onto `U`.
pub fn project_control(u: &ControlPath, set: &ControlSet) -> ControlPath {
    let values = u.path().values().iter().map(|v| set.project(v)).collect();
    ControlPath::new(SampledPath::from_parts_unchecked(*u.grid(), u.dim(), values))
}

fn d_max_iters() -> usize {
    500
}
fn d_grad_tol() -> f64 {
    1e-5
}
fn d_step_init() -> f64 {
    1.0
}
fn d_armijo_c() -> f64 {
    1e-4
}
fn d_armijo_shrink() -> f64 {
    0.5
}
fn d_min_step() -> f64 {
    1e-12
}
fn d_multistart() -> usize {
    1
}
fn d_true() -> bool {
    true
}
fn d_start_spread() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "d_max_iters")]
    pub max_iters: usize,
    #[serde(default = "d_grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "d_step_init")]
    pub step_init: f64,
    #[serde(default = "d_armijo_c")]
    pub armijo_c: f64,
    #[serde(default = "d_armijo_shrink")]
    pub armijo_shrink: f64,
    #[serde(default = "d_min_step")]
    pub min_step: f64,
    #[serde(default = "d_multistart")]
    pub multistart: usize,
    /// Try the Barzilai–Borwein step before `step_init`.
    #[serde(default = "d_true")]
    pub spectral_step: bool,
    /// Scale the descent direction by `S^{-1}` (quadratic costs only).
    #[serde(default)]
    pub precondition: bool,
    /// Seed for the extra multistart initial controls.
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of the Gaussian perturbation for extra starts.
    #[serde(default = "d_start_spread")]
    pub start_spread: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: d_max_iters(),
            grad_tol: d_grad_tol(),
            step_init: d_step_init(),
            armijo_c: d_armijo_c(),
            armijo_shrink: d_armijo_shrink(),
            min_step: d_min_step(),
            multistart: d_multistart(),
            spectral_step: true,
            precondition: false,
            seed: 0,
            start_spread: d_start_spread(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(format!("optimizer: {what}")));
        if self.max_iters == 0 {
            return bad("max_iters must be positive");
        }
        if !(self.grad_tol > 0.0) || !(self.step_init > 0.0) || !(self.min_step > 0.0) {
            return bad("grad_tol, step_init and min_step must be positive");
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) || !(self.armijo_shrink > 0.0 && self.armijo_shrink < 1.0) {
            return bad("armijo_c and armijo_shrink must lie in (0, 1)");
        }
        if self.multistart == 0 {
            return bad("multistart must be at least 1");
        }
        if !(self.start_spread >= 0.0) {
            return bad("start_spread must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIters,
    Stalled,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Converged => "converged",
            Status::MaxIters => "max_iters",
            Status::Stalled => "stalled",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AssimilationResult {
    pub triple: OptimalTriple,
    /// Cost of the initial control followed by every accepted iterate.
    pub cost_trace: Vec<f64>,
    /// Projected-gradient sup norm at every visited iterate.
    pub grad_norm_trace: Vec<f64>,
    pub mp_residual: f64,
    pub iterations: usize,
    pub status: Status,
    /// Index of the winning start in a multistart run.
    pub start: usize,
}

impl AssimilationResult {
    pub fn final_cost(&self) -> f64 {
        *self.cost_trace.last().expect("cost trace is never empty")
    }

    pub fn grad_norm(&self) -> f64 {
        *self.grad_norm_trace.last().expect("gradient trace is never empty")
    }
}

fn projected_gradient_norm(u: &ControlPath, g: &SampledPath, set: &ControlSet) -> f64 {
    (0..u.grid().n_steps())
        .map(|i| {
            let ui = u.interval(i);
            (ui - set.project(&(ui - g.value(i)))).amax()
        })
        .fold(0.0, f64::max)
}

fn with_intervals(u: &ControlPath, mut f: impl FnMut(usize, &DVector<f64>) -> DVector<f64>) -> Result<ControlPath> {
    let values = u.intervals().iter().enumerate().map(|(i, v)| f(i, v)).collect();
    ControlPath::from_intervals(*u.grid(), values)
}

/// Forward solve and cost; blow-ups map to `None`.
fn evaluate(problem: &Problem<'_>, xi: &DVector<f64>, u: &ControlPath) -> Result<Option<(SampledPath, f64)>> {
    match integrate_state(problem.model, u, xi) {
        Ok(x) => match eval_cost(problem.cost, &x, u, problem.eta) {
            Ok(j) => Ok(Some((x, j))),
            Err(Error::BlowUp { .. }) => Ok(None),
            Err(e) => Err(e),
        },
        Err(Error::BlowUp { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Projected gradient descent with Armijo backtracking from `u0`.
pub fn minimize(
    problem: &Problem<'_>,
    xi: &DVector<f64>,
    u0: &ControlPath,
    config: &OptimizerConfig,
) -> Result<AssimilationResult> {
    config.validate()?;
    problem.grid().ensure_same(u0.grid(), "optimizer control/observation")?;
    problem.control_set.validate(problem.model.control_dim())?;
    let set = problem.control_set;
    let grid = *problem.grid();
    let dt = grid.dt();

    let mut u = project_control(u0, set);
    let (mut x, mut cost) =
        evaluate(problem, xi, &u)?.ok_or(Error::BlowUp { what: "initial state", node: 0 })?;
    let mut cost_trace = vec![cost];
    let mut grad_norm_trace = Vec::new();
    let mut previous: Option<(ControlPath, Vec<DVector<f64>>)> = None;
    let mut iterations = 0;

    let status = loop {
        let grad = discrete_gradient(problem.model, problem.cost, &x, &u, problem.eta)?;
        let pg = projected_gradient_norm(&u, &grad, set);
        grad_norm_trace.push(pg);
        if pg < config.grad_tol {
            break Status::Converged;
        }
        if iterations >= config.max_iters {
            break Status::MaxIters;
        }

        let direction: Vec<DVector<f64>> = (0..grid.n_steps())
            .map(|i| {
                let gi = grad.value(i).clone();
                if !config.precondition {
                    return gi;
                }
                let (t0, t1) = (grid.time(i), grid.time(i + 1));
                match (problem.cost.control_hessian(t0), problem.cost.control_hessian(t1)) {
                    (Some(a), Some(b)) => ((a + b) * 0.5).cholesky().map(|c| c.solve(&gi)).unwrap_or(gi),
                    _ => gi,
                }
            })
            .collect();

        let mut starts = vec![config.step_init];
        if config.spectral_step {
            if let Some((u_prev, d_prev)) = &previous {
                let (mut ss, mut sy) = (0.0, 0.0);
                for i in 0..grid.n_steps() {
                    let s = u.interval(i) - u_prev.interval(i);
                    let y = &direction[i] - &d_prev[i];
                    ss += s.norm_squared();
                    sy += s.dot(&y);
                }
                let bb = ss / sy;
                if bb.is_finite() && bb > 0.0 && bb != config.step_init {
                    // A short spectral step can fall below the resolution
                    // of the cost; backtracking then restarts from step_init.
                    starts.insert(0, bb.clamp(config.min_step, 1e6 * config.step_init));
                }
            }
        }

        let mut accepted = None;
        'starts: for &start in &starts {
            let mut alpha = start;
            while alpha >= config.min_step {
                let trial = with_intervals(&u, |i, v| set.project(&(v - &direction[i] * alpha)))?;
                let slope: f64 = (0..grid.n_steps())
                    .map(|i| grad.value(i).dot(&(trial.interval(i) - u.interval(i))))
                    .sum::<f64>()
                    * dt;
                if let Some((xt, jt)) = evaluate(problem, xi, &trial)? {
                    if jt < cost && jt <= cost + config.armijo_c * slope {
                        accepted = Some((trial, xt, jt));
                        break 'starts;
                    }
                }
                alpha *= config.armijo_shrink;
            }
        }
        let Some((trial, xt, jt)) = accepted else {
            break Status::Stalled;
        };
        previous = Some((std::mem::replace(&mut u, trial), direction));
        x = xt;
        cost = jt;
        cost_trace.push(cost);
        iterations += 1;
    };

    let lambda = solve_costate(problem.model, problem.cost, &x, &u, problem.eta)?;
    let triple = OptimalTriple { x, u, lambda };
    let mp_residual = max_principle_residual(&triple, problem.cost, problem.model, set, Probe::Auto)?;
    Ok(AssimilationResult {
        triple,
        cost_trace,
        grad_norm_trace,
        mp_residual,
        iterations,
        status,
        start: 0,
    })
}

/// Initial control of start `k`: `u0` itself for `k = 0`, otherwise `u0`
/// plus independent Gaussian noise from stream `k` of the configured seed.
pub fn multistart_initial(u0: &ControlPath, config: &OptimizerConfig, k: usize) -> Result<ControlPath> {
    if k == 0 {
        return Ok(u0.clone());
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    rng.set_stream(k as u64);
    with_intervals(u0, |_, v| {
        v + DVector::from_fn(v.len(), |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            config.start_spread * z
        })
    })
}

/// Runs `config.multistart` independent starts in parallel and keeps the one
/// with the lowest final cost (earliest start on ties), so the outcome does
/// not depend on the thread count.
pub fn minimize_multistart(
    problem: &Problem<'_>,
    xi: &DVector<f64>,
    u0: &ControlPath,
    config: &OptimizerConfig,
) -> Result<AssimilationResult> {
    config.validate()?;
    let runs: Vec<Result<AssimilationResult>> = (0..config.multistart)
        .into_par_iter()
        .map(|k| {
            let start = multistart_initial(u0, config, k)?;
            minimize(problem, xi, &start, config).map(|mut r| {
                r.start = k;
                r
            })
        })
        .collect();
    let mut best: Option<AssimilationResult> = None;
    let mut first_error = None;
    for run in runs {
        match run {
            Ok(r) => {
                if best.as_ref().is_none_or(|b| r.final_cost() < b.final_cost()) {
                    best = Some(r);
                }
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_error.expect("at least one start ran"))
}
