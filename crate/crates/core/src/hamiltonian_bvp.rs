//! The state/costate two-point boundary-value problem.
//!
//! With the pointwise minimiser `v(t, x, lambda) = Pi_U(-S^{-1} g^T lambda)`
//! of a control-quadratic cost, optimal pairs solve
//!
//! `x' = f + g v`, `x(0) = xi`,
//! `d lambda = -(D_x phi(., ., v) + lambda (D_x f + (D_x g) v)) dt - D_x psi d eta`, `lambda(T) = 0`.
//!
//! [`integrate_hamiltonian`] marches this forward from a guess of
//! `lambda(0)`, [`shoot`] adjusts the guess by damped Newton until
//! `lambda(T) = 0`, and [`value_probe`] compares finite differences of the
//! value function with `lambda(0)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{hermite_mid, hamiltonian_minimizer, interval_minimizer, solve_costate, Costate, OptimalTriple};
use crate::cost::eval_cost;
use crate::dynamics::{integrate_state, state_jacobian, velocity, ControlPath};
use crate::optimizer::{minimize, AssimilationResult, OptimizerConfig, Status};
use crate::roughpath::SampledPath;
use crate::{Error, Problem, Result};

fn d_newton_max_iters() -> usize {
    50
}
fn d_newton_tol() -> f64 {
    1e-9
}
fn d_fd_step() -> f64 {
    1e-6
}
fn d_damping() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShootingConfig {
    #[serde(default = "d_newton_max_iters")]
    pub newton_max_iters: usize,
    /// Tolerance on `|lambda(T)|`.
    #[serde(default = "d_newton_tol")]
    pub newton_tol: f64,
    /// Relative finite-difference step for the Jacobian of `lambda(T)`.
    #[serde(default = "d_fd_step")]
    pub fd_step: f64,
    #[serde(default = "d_damping")]
    pub damping: f64,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        Self {
            newton_max_iters: d_newton_max_iters(),
            newton_tol: d_newton_tol(),
            fd_step: d_fd_step(),
            damping: d_damping(),
        }
    }
}

impl ShootingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.newton_max_iters == 0 || !(self.newton_tol > 0.0) || !(self.fd_step > 0.0) {
            return Err(Error::InvalidParameter(
                "shooting: newton_max_iters, newton_tol and fd_step must be positive".into(),
            ));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidParameter("shooting: damping must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

fn minimizer(problem: &Problem<'_>, t: f64, x: &DVector<f64>, lambda: &DVector<f64>) -> Result<DVector<f64>> {
    hamiltonian_minimizer(problem.cost, problem.model, problem.control_set, t, x, lambda)
        .ok_or_else(|| Error::UnsupportedCost("the Hamiltonian system needs a cost quadratic in the control".into()))
}

/// Forward march of the Hamiltonian system from `(xi, lambda0)`.
///
/// Each step removes the Young jump `D_x psi(t_i, x_i)^T (eta_{i+1} - eta_i)`
/// from `lambda` and then takes an RK4 step of the smooth system. The
/// returned costate holds the node values, the post-jump right limits and
/// Hermite midpoints.
pub fn integrate_hamiltonian(
    problem: &Problem<'_>,
    xi: &DVector<f64>,
    lambda0: &DVector<f64>,
) -> Result<(SampledPath, Costate)> {
    let (model, cost) = (problem.model, problem.cost);
    let n = model.state_dim();
    if xi.len() != n || lambda0.len() != n {
        return Err(Error::Dimension(format!("initial state and costate must have length {n}")));
    }
    let grid = *problem.grid();
    let dt = grid.dt();
    let rate = |t: f64, x: &DVector<f64>, lam: &DVector<f64>| -> Result<(DVector<f64>, DVector<f64>)> {
        let v = minimizer(problem, t, x, lam)?;
        let dx = velocity(model, t, x, &v);
        let dlam = -(state_jacobian(model, t, x, &v).transpose() * lam + cost.phi_x(t, x, &v));
        Ok((dx, dlam))
    };

    let mut xs = Vec::with_capacity(grid.n_nodes());
    let mut lams = Vec::with_capacity(grid.n_nodes());
    let mut right = Vec::with_capacity(grid.n_nodes());
    let mut mids = Vec::with_capacity(grid.n_steps());
    let mut xmids = Vec::with_capacity(grid.n_steps());
    xs.push(xi.clone());
    lams.push(lambda0.clone());
    for i in 0..grid.n_steps() {
        let (t0, t1) = (grid.time(i), grid.time(i + 1));
        let x0 = &xs[i];
        let jump = cost.psi_x(t0, x0).transpose() * problem.eta.increment(i);
        let lam0 = &lams[i] - jump;
        let h2 = 0.5 * dt;
        let (a1, b1) = rate(t0, x0, &lam0)?;
        let (a2, b2) = rate(t0 + h2, &(x0 + &a1 * h2), &(&lam0 + &b1 * h2))?;
        let (a3, b3) = rate(t0 + h2, &(x0 + &a2 * h2), &(&lam0 + &b2 * h2))?;
        let (a4, b4) = rate(t1, &(x0 + &a3 * dt), &(&lam0 + &b3 * dt))?;
        let x1 = x0 + (&a1 + a2 * 2.0 + a3 * 2.0 + a4) * (dt / 6.0);
        let l1 = &lam0 + (&b1 + b2 * 2.0 + b3 * 2.0 + b4) * (dt / 6.0);
        if x1.iter().chain(l1.iter()).any(|c| !c.is_finite()) {
            return Err(Error::BlowUp {
                what: "Hamiltonian system",
                node: i + 1,
            });
        }
        let (a5, b5) = rate(t1, &x1, &l1)?;
        xmids.push(hermite_mid(x0, &a1, &x1, &a5, dt));
        mids.push(hermite_mid(&lam0, &b1, &l1, &b5, dt));
        right.push(lam0);
        xs.push(x1);
        lams.push(l1);
    }
    right.push(lams[grid.n_steps()].clone());
    let x = SampledPath::new(grid, xs)?;
    let lambda = Costate::from_parts(SampledPath::new(grid, lams)?, right, mids, xmids)?;
    Ok((x, lambda))
}

#[derive(Debug, Clone)]
pub struct ShootingResult {
    /// Control from the interval minimiser along the converged Hamiltonian
    /// flow, with the state re-integrated and the costate re-solved.
    pub triple: OptimalTriple,
    /// Hamiltonian flow state and costate at the converged `lambda(0)`.
    pub flow: (SampledPath, Costate),
    pub lambda0: DVector<f64>,
    /// `|lambda(T)|` at the converged `lambda(0)`.
    pub residual: f64,
    pub iterations: usize,
}

fn terminal(problem: &Problem<'_>, xi: &DVector<f64>, lambda0: &DVector<f64>) -> Option<DVector<f64>> {
    integrate_hamiltonian(problem, xi, lambda0)
        .ok()
        .map(|(_, lam)| lam.terminal().clone())
}

/// Damped Newton on `lambda0 -> lambda(T; lambda0)` with a forward-difference
/// Jacobian and residual-halving backtracking.
pub fn shoot(
    problem: &Problem<'_>,
    xi: &DVector<f64>,
    lambda0_guess: &DVector<f64>,
    config: &ShootingConfig,
) -> Result<ShootingResult> {
    config.validate()?;
    // Surface unsupported costs and dimension errors before iterating.
    let first = integrate_hamiltonian(problem, xi, lambda0_guess)?;
    let n = xi.len();
    let mut lambda0 = lambda0_guess.clone();
    let mut f = first.1.terminal().clone();
    let mut norm = f.norm();
    let mut iterations = 0;
    while norm >= config.newton_tol {
        if iterations >= config.newton_max_iters {
            return Err(Error::NoConvergence {
                iterations,
                best_residual: norm,
            });
        }
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let h = config.fd_step * (1.0 + lambda0[j].abs());
            let mut probe = lambda0.clone();
            probe[j] += h;
            let fj = terminal(problem, xi, &probe).ok_or(Error::NoConvergence {
                iterations,
                best_residual: norm,
            })?;
            jac.set_column(j, &((fj - &f) / h));
        }
        let step = jac.lu().solve(&(-&f)).ok_or(Error::NoConvergence {
            iterations,
            best_residual: norm,
        })?;
        let mut scale = config.damping;
        let mut accepted = None;
        for _ in 0..30 {
            let trial = &lambda0 + &step * scale;
            if let Some(ft) = terminal(problem, xi, &trial) {
                if ft.norm() < norm {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((trial, ft)) = accepted else {
            return Err(Error::NoConvergence {
                iterations,
                best_residual: norm,
            });
        };
        lambda0 = trial;
        f = ft;
        norm = f.norm();
        iterations += 1;
    }

    let flow = integrate_hamiltonian(problem, xi, &lambda0)?;
    let grid = *problem.grid();
    let controls = (0..grid.n_steps())
        .map(|i| {
            interval_minimizer(problem.cost, problem.model, problem.control_set, &flow.0, &flow.1, i)
                .ok_or_else(|| Error::UnsupportedCost("interval minimiser unavailable".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let u = ControlPath::from_intervals(grid, controls)?;
    let x = integrate_state(problem.model, &u, xi)?;
    let lambda = solve_costate(problem.model, problem.cost, &x, &u, problem.eta)?;
    Ok(ShootingResult {
        triple: OptimalTriple { x, u, lambda },
        flow,
        lambda0,
        residual: norm,
        iterations,
    })
}

/// Which solver produces `V` in [`value_probe`].
#[derive(Debug, Clone, PartialEq)]
pub enum Solver {
    Gradient(OptimizerConfig),
    Shoot(ShootingConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueProbe {
    pub value: f64,
    pub dv_fd: DVector<f64>,
    pub lambda0: DVector<f64>,
    /// `|dv_fd - lambda0|` componentwise.
    pub gap: DVector<f64>,
    pub max_abs_gap: f64,
}

struct Solve {
    value: f64,
    lambda0: DVector<f64>,
    u: ControlPath,
}

fn solve_at(problem: &Problem<'_>, xi: &DVector<f64>, solver: &Solver, warm: Option<&Solve>) -> Result<Solve> {
    match solver {
        Solver::Gradient(config) => {
            let u0 = warm
                .map(|w| w.u.clone())
                .unwrap_or_else(|| ControlPath::zeros(*problem.grid(), problem.model.control_dim()));
            let r: AssimilationResult = minimize(problem, xi, &u0, config)?;
            if r.status != Status::Converged {
                return Err(Error::NoConvergence {
                    iterations: r.iterations,
                    best_residual: r.grad_norm(),
                });
            }
            Ok(Solve {
                value: r.final_cost(),
                lambda0: r.triple.lambda.initial().clone(),
                u: r.triple.u,
            })
        }
        Solver::Shoot(config) => {
            let guess = warm
                .map(|w| w.lambda0.clone())
                .unwrap_or_else(|| DVector::zeros(xi.len()));
            let r = shoot(problem, xi, &guess, config)?;
            let value = eval_cost(problem.cost, &r.triple.x, &r.triple.u, problem.eta)?;
            Ok(Solve {
                value,
                lambda0: r.lambda0,
                u: r.triple.u,
            })
        }
    }
}

/// Central differences of the value function against `lambda(0)`.
///
/// The `2n` perturbed solves are warm-started from the solve at `xi` and run
/// in parallel.
pub fn value_probe(problem: &Problem<'_>, xi: &DVector<f64>, h: f64, solver: &Solver) -> Result<ValueProbe> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidParameter("value probe needs h > 0".into()));
    }
    let base = solve_at(problem, xi, solver, None)?;
    let n = xi.len();
    let sides: Vec<Result<f64>> = (0..2 * n)
        .into_par_iter()
        .map(|k| {
            let mut z = xi.clone();
            z[k / 2] += if k % 2 == 0 { h } else { -h };
            solve_at(problem, &z, solver, Some(&base)).map(|s| s.value)
        })
        .collect();
    let sides = sides.into_iter().collect::<Result<Vec<_>>>()?;
    let dv_fd = DVector::from_fn(n, |i, _| (sides[2 * i] - sides[2 * i + 1]) / (2.0 * h));
    let gap = (&dv_fd - &base.lambda0).abs();
    let max_abs_gap = gap.max();
    Ok(ValueProbe {
        value: base.value,
        dv_fd,
        lambda0: base.lambda0,
        gap,
        max_abs_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::cost::{build_minimum_energy, CoordinateProjection, MatrixFn, QuadraticCostSpec};
    use crate::dynamics::{LinearModel, Lorenz63, Lorenz63Params};
    use crate::optimizer::ControlSet;
    use crate::roughpath::TimeGrid;

    fn scalar_cost(q: f64, r: f64, grid: &TimeGrid) -> crate::cost::QuadraticCost {
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

    #[test]
    fn decoupled_when_costate_starts_at_zero_without_forcing() {
        let g = TimeGrid::new(0.5, 512).unwrap();
        let model = Lorenz63::new(Lorenz63Params::default()).unwrap();
        let cost = build_minimum_energy(
            QuadraticCostSpec {
                h: Arc::new(CoordinateProjection::new(vec![0], 3).unwrap()),
                r: MatrixFn::Constant(DMatrix::zeros(1, 1)),
                s: MatrixFn::Constant(DMatrix::identity(3, 3)),
                control_dim: 3,
            },
            &g,
        )
        .unwrap();
        let eta = SampledPath::zeros(g, 1);
        let set = ControlSet::AllSpace;
        let problem = Problem::new(&model, &cost, &eta, &set);
        let xi = DVector::from_column_slice(&[1.0, 1.0, -20.0]);
        let (x, lam) = integrate_hamiltonian(&problem, &xi, &DVector::zeros(3)).unwrap();
        assert!(lam.path().values().iter().all(|l| l.norm() == 0.0));
        let free = integrate_state(&model, &ControlPath::zeros(g, 3), &xi).unwrap();
        let gap = x.sup_distance(&free).unwrap();
        assert!(gap < 1e-8, "{gap}");

        let r = shoot(&problem, &xi, &DVector::zeros(3), &ShootingConfig::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.lambda0, DVector::zeros(3));
    }

    #[test]
    fn scalar_lq_terminal_costate_is_affine() {
        let g = TimeGrid::new(1.0, 256).unwrap();
        let model = LinearModel::scalar(0.5);
        let cost = scalar_cost(1.0, 1.0, &g);
        let eta = SampledPath::zeros(g, 1);
        let set = ControlSet::AllSpace;
        let problem = Problem::new(&model, &cost, &eta, &set);
        let xi = DVector::from_element(1, 1.0);
        let f = |l: f64| {
            integrate_hamiltonian(&problem, &xi, &DVector::from_element(1, l))
                .unwrap()
                .1
                .terminal()[0]
        };
        let slope = f(1.0) - f(0.0);
        let predicted = f(0.0) + 3.7 * slope;
        assert!((f(3.7) - predicted).abs() < 1e-6 * (1.0 + predicted.abs()));
    }

    #[test]
    fn unsupported_cost_is_reported() {
        struct NoHessian(crate::cost::QuadraticCost);
        impl crate::cost::Cost for NoHessian {
            fn state_dim(&self) -> usize {
                self.0.state_dim()
            }
            fn control_dim(&self) -> usize {
                self.0.control_dim()
            }
            fn obs_dim(&self) -> usize {
                self.0.obs_dim()
            }
            fn phi(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
                self.0.phi(t, x, u)
            }
            fn phi_x(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
                self.0.phi_x(t, x, u)
            }
            fn phi_u(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
                self.0.phi_u(t, x, u)
            }
            fn psi(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
                self.0.psi(t, x)
            }
            fn psi_x(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
                self.0.psi_x(t, x)
            }
        }
        let g = TimeGrid::new(1.0, 8).unwrap();
        let model = LinearModel::scalar(0.5);
        let cost = NoHessian(scalar_cost(1.0, 1.0, &g));
        let eta = SampledPath::zeros(g, 1);
        let set = ControlSet::AllSpace;
        let problem = Problem::new(&model, &cost, &eta, &set);
        let err = integrate_hamiltonian(&problem, &DVector::zeros(1), &DVector::zeros(1)).unwrap_err();
        assert!(matches!(err, Error::UnsupportedCost(_)));
    }
}
