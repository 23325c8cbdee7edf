//! The simulate / assimilate / value-probe commands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use assim_core::cost::eval_cost;
use assim_core::dynamics::{integrate_state, ControlPath};
use assim_core::hamiltonian_bvp::{shoot, value_probe, Solver};
use assim_core::optimizer::{minimize, minimize_multistart};
use assim_core::roughpath::{build_observation, cumulative_trapezoid, load_csv, save_csv};
use assim_core::{AssimilationResult, Error, Problem, SampledPath, Status};
use nalgebra::DVector;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Experiment;
use crate::{write_json, CliError, ExitCode, SCHEMA_VERSION};

/// Wall-clock time per phase, written next to the deterministic outputs.
#[derive(Default)]
pub struct Timings(Vec<(String, f64)>);

impl Timings {
    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.0.push((phase.to_owned(), start.elapsed().as_secs_f64()));
        out
    }

    fn write(&self, dir: &Path, command: &str) -> Result<(), CliError> {
        let phases: serde_json::Map<String, Value> = self.0.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
        let total: f64 = self.0.iter().map(|(_, v)| v).sum();
        write_json(
            &dir.join(format!("{command}.timings.json")),
            &json!({ "schema_version": SCHEMA_VERSION, "command": command, "wall_clock_s": total, "phases_s": phases }),
        )
    }
}

pub struct TwinData {
    pub truth: SampledPath,
    pub eta: SampledPath,
}

/// Truth trajectory and integrated observations `eta = zeta + noise * W`.
pub fn twin_data(exp: &Experiment) -> Result<TwinData, CliError> {
    let truth = integrate_state(exp.model.as_ref(), &exp.truth_control, &exp.xi_truth)?;
    let h = truth.map(|_, x| DVector::from_iterator(exp.observed.len(), exp.observed.iter().map(|&k| x[k])))?;
    let zeta = cumulative_trapezoid(&h);
    let obs = &exp.config.observation;
    let eta = build_observation(&zeta, obs.noise_scale, obs.seed)?.path;
    Ok(TwinData { truth, eta })
}

fn output_dir(exp: &Experiment, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = flag
        .or_else(|| exp.config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(e.into()))?;
    Ok(dir)
}

pub fn simulate(exp: &Experiment, out: Option<PathBuf>) -> Result<ExitCode, CliError> {
    let dir = output_dir(exp, out)?;
    let mut timings = Timings::default();
    let data = timings.time("integrate", || twin_data(exp))?;
    timings.time("write", || -> Result<(), CliError> {
        save_csv(&data.truth, dir.join("truth.csv"))?;
        save_csv(&data.eta, dir.join("eta.csv"))?;
        write_json(
            &dir.join("manifest.json"),
            &json!({
                "schema_version": SCHEMA_VERSION,
                "artifact_version": env!("CARGO_PKG_VERSION"),
                "command": "simulate",
                "config_hash": exp.hash,
                "seeds": exp.seeds(),
                "model": exp.model.name(),
                "grid": { "horizon": exp.grid.horizon(), "n_steps": exp.grid.n_steps() },
                "xi_truth": exp.xi_truth.as_slice(),
                "files": ["truth.csv", "eta.csv"],
                "truth_sup_norm": data.truth.sup_norm(),
            }),
        )
    })?;
    timings.write(&dir, "simulate")?;
    Ok(ExitCode::Success)
}

/// Root-mean-square error per state component over all grid nodes.
pub fn rmse(a: &SampledPath, b: &SampledPath) -> Result<f64, CliError> {
    a.grid().ensure_same(b.grid(), "rmse")?;
    if a.dim() != b.dim() {
        return Err(CliError::config("truth and estimate dimensions differ"));
    }
    let sum: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).norm_squared()).sum();
    Ok((sum / (a.len() * a.dim()) as f64).sqrt())
}

fn load_path(path: &Path, what: &str) -> Result<SampledPath, CliError> {
    load_csv(path).map_err(|e| CliError::config(format!("{what} {}: {e}", path.display())))
}

fn check_eta(exp: &Experiment, eta: &SampledPath) -> Result<(), CliError> {
    exp.grid
        .ensure_same(eta.grid(), "config/eta")
        .map_err(|e| CliError::config(e.to_string()))?;
    if eta.dim() != exp.observed.len() {
        return Err(CliError::config(format!(
            "eta has dimension {}, the observation operator {}",
            eta.dim(),
            exp.observed.len()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct ShootingSummary {
    converged: bool,
    residual: Option<f64>,
    iterations: Option<usize>,
    cost: Option<f64>,
    max_control_gap: Option<f64>,
    error: Option<String>,
}

fn run_optimizer(exp: &Experiment, problem: &Problem<'_>) -> Result<AssimilationResult, CliError> {
    let u0 = ControlPath::zeros(exp.grid, exp.model.control_dim());
    let cfg = &exp.config.optimizer;
    Ok(if cfg.multistart > 1 {
        minimize_multistart(problem, &exp.xi_assim, &u0, cfg)?
    } else {
        minimize(problem, &exp.xi_assim, &u0, cfg)?
    })
}

pub fn assimilate(
    exp: &Experiment,
    eta_file: &Path,
    truth_file: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<ExitCode, CliError> {
    let eta = load_path(eta_file, "eta")?;
    check_eta(exp, &eta)?;
    let truth = truth_file.map(|p| load_path(p, "truth")).transpose()?;
    if let Some(t) = &truth {
        t.grid()
            .ensure_same(&exp.grid, "config/truth")
            .map_err(|e| CliError::config(e.to_string()))?;
    }
    let dir = output_dir(exp, out)?;
    let mut timings = Timings::default();
    let problem = Problem::new(exp.model.as_ref(), exp.cost(), &eta, &exp.config.control_set);

    let result = timings.time("optimize", || run_optimizer(exp, &problem))?;
    let triple = &result.triple;
    let converged = result.status == Status::Converged;

    let shooting = exp.config.shooting.as_ref().map(|cfg| {
        timings.time("shoot", || match shoot(&problem, &exp.xi_assim, triple.lambda.initial(), cfg) {
            Ok(s) => {
                let cost = eval_cost(exp.cost(), &s.triple.x, &s.triple.u, &eta).ok();
                let gap = s.triple.u.path().sup_distance(triple.u.path()).ok();
                ShootingSummary {
                    converged: true,
                    residual: Some(s.residual),
                    iterations: Some(s.iterations),
                    cost,
                    max_control_gap: gap,
                    error: None,
                }
            }
            Err(e) => ShootingSummary {
                converged: false,
                residual: None,
                iterations: None,
                cost: None,
                max_control_gap: None,
                error: Some(e.to_string()),
            },
        })
    });

    let cost_me = eval_cost(&exp.minimum_energy, &triple.x, &triple.u, &eta)?;
    let cost_om = match &exp.onsager_machlup {
        Some(c) => Some(eval_cost(c, &triple.x, &triple.u, &eta)?),
        None => None,
    };
    let skill = match &truth {
        Some(t) => {
            let free = integrate_state(
                exp.model.as_ref(),
                &ControlPath::zeros(exp.grid, exp.model.control_dim()),
                &exp.xi_assim,
            )?;
            Some((rmse(&triple.x, t)?, rmse(&free, t)?))
        }
        None => None,
    };

    timings.time("write", || -> Result<(), CliError> {
        save_csv(&triple.x, dir.join("estimate.csv"))?;
        save_csv(triple.u.path(), dir.join("control.csv"))?;
        save_csv(triple.lambda.path(), dir.join("costate.csv"))?;
        write_json(
            &dir.join("result.json"),
            &json!({
                "schema_version": SCHEMA_VERSION,
                "artifact_version": env!("CARGO_PKG_VERSION"),
                "config_hash": exp.hash,
                "seeds": exp.seeds(),
                "status": result.status.as_str(),
                "iterations": result.iterations,
                "multistart_winner": result.start,
                "cost_kind": exp.config.cost.kind,
                "final_cost": result.final_cost(),
                "cost_minimum_energy": cost_me,
                "cost_onsager_machlup": cost_om,
                "mp_residual": result.mp_residual,
                "grad_norm": result.grad_norm(),
                "cost_trace": result.cost_trace,
                "grad_norm_trace": result.grad_norm_trace,
                "xi": exp.xi_assim.as_slice(),
                "lambda0": triple.lambda.initial().as_slice(),
                "rmse_estimate": skill.map(|s| s.0),
                "rmse_free_run": skill.map(|s| s.1),
                "shooting": shooting,
            }),
        )
    })?;
    timings.write(&dir, "assimilate")?;

    let shooting_ok = shooting.as_ref().is_none_or(|s| s.converged);
    Ok(if converged && shooting_ok {
        ExitCode::Success
    } else {
        ExitCode::NoConvergence
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SolverKind {
    Gradient,
    Shoot,
}

pub fn probe(
    exp: &Experiment,
    h: f64,
    solver: SolverKind,
    eta_file: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<ExitCode, CliError> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(CliError::config("--h must be positive"));
    }
    let eta = match eta_file {
        Some(p) => {
            let eta = load_path(p, "eta")?;
            check_eta(exp, &eta)?;
            eta
        }
        None => twin_data(exp)?.eta,
    };
    let dir = output_dir(exp, out)?;
    let solver = match solver {
        SolverKind::Gradient => Solver::Gradient(exp.config.optimizer.clone()),
        SolverKind::Shoot => Solver::Shoot(exp.config.shooting.clone().unwrap_or_default()),
    };
    let problem = Problem::new(exp.model.as_ref(), exp.cost(), &eta, &exp.config.control_set);
    let mut timings = Timings::default();
    let (code, body) = match timings.time("probe", || value_probe(&problem, &exp.xi_assim, h, &solver)) {
        Ok(p) => (
            ExitCode::Success,
            json!({
                "status": "converged",
                "value": p.value,
                "dv_fd": p.dv_fd.as_slice(),
                "lambda0": p.lambda0.as_slice(),
                "gap": p.gap.as_slice(),
                "max_abs_gap": p.max_abs_gap,
            }),
        ),
        Err(e @ Error::NoConvergence { .. }) => (ExitCode::NoConvergence, json!({ "status": "no_convergence", "error": e.to_string() })),
        Err(e) => return Err(e.into()),
    };
    let mut doc = json!({
        "schema_version": SCHEMA_VERSION,
        "config_hash": exp.hash,
        "h": h,
        "solver": match solver { Solver::Gradient(_) => "gradient", Solver::Shoot(_) => "shoot" },
        "xi": exp.xi_assim.as_slice(),
    });
    doc.as_object_mut().unwrap().extend(body.as_object().unwrap().clone());
    write_json(&dir.join("value_probe.json"), &doc)?;
    timings.write(&dir, "value-probe")?;
    Ok(code)
}
