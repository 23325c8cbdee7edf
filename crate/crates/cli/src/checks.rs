//! Property suites behind `assim check`. Every suite is deterministic given
//! the seed and records one entry per invariant in report.json.

use std::path::PathBuf;
use std::sync::Arc;

use assim_core::adjoint::{
    control_gradient, duality_check, hamiltonian, hamiltonian_minimizer, interval_minimizer, max_principle_residual,
    solve_costate, OptimalTriple, Probe,
};
use assim_core::cost::{build_minimum_energy, eval_cost, CoordinateProjection, MatrixFn, QuadraticCost, QuadraticCostSpec};
use assim_core::dynamics::{integrate_state, jacobian_fd_error, ControlPath, LinearModel, Lorenz63, Lorenz63Params};
use assim_core::hamiltonian_bvp::{value_probe, ShootingConfig, Solver};
use assim_core::oracle::{brute_force_p_variation, ScalarLq};
use assim_core::roughpath::{
    build_observation, cumulative_trapezoid, oscillation, p_variation, sample_wiener, sample_wiener_stream,
    young_bound_check, young_integral, MatrixPath, Tag,
};
use assim_core::{ControlSet, OptimizerConfig, Problem, SampledPath, TimeGrid};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::{write_json, CliError, ExitCode, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Roughpath,
    Adjoint,
    Duality,
    Gradient,
    Valueprobe,
    All,
}

#[derive(Debug, Clone, Copy, Serialize)]
#[serde(tag = "op")]
pub enum Bound {
    #[serde(rename = "<")]
    Below { value: f64 },
    #[serde(rename = ">=")]
    AtLeast { value: f64 },
    #[serde(rename = "in")]
    Within { lo: f64, hi: f64 },
}

impl Bound {
    fn holds(&self, x: f64) -> bool {
        match *self {
            Bound::Below { value } => x < value,
            Bound::AtLeast { value } => x >= value,
            Bound::Within { lo, hi } => (lo..=hi).contains(&x),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub invariant: String,
    pub measured: f64,
    pub tolerance: Bound,
    pub pass: bool,
}

fn check(suite: &'static str, invariant: impl Into<String>, measured: f64, tolerance: Bound) -> Check {
    Check {
        suite,
        invariant: invariant.into(),
        measured,
        pass: tolerance.holds(measured),
        tolerance,
    }
}

fn below(v: f64) -> Bound {
    Bound::Below { value: v }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<Check>, CliError> {
    Ok(match suite {
        Suite::Roughpath => roughpath(seed),
        Suite::Adjoint => adjoint(seed)?,
        Suite::Duality => duality(seed)?,
        Suite::Gradient => gradient(seed)?,
        Suite::Valueprobe => valueprobe(seed)?,
        Suite::All => {
            let mut all = Vec::new();
            for s in [Suite::Roughpath, Suite::Adjoint, Suite::Duality, Suite::Gradient, Suite::Valueprobe] {
                all.extend(run_suite(s, seed)?);
            }
            all
        }
    })
}

pub fn run(suite: Suite, seed: u64, out: Option<PathBuf>) -> Result<ExitCode, CliError> {
    let checks = run_suite(suite, seed)?;
    let passed = checks.iter().all(|c| c.pass);
    for c in &checks {
        eprintln!(
            "{} {}/{}: {:e}",
            if c.pass { "pass" } else { "FAIL" },
            c.suite,
            c.invariant,
            c.measured
        );
    }
    let dir = out.unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(e.into()))?;
    write_json(
        &dir.join("report.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "suite": suite,
            "seed": seed,
            "passed": passed,
            "checks": checks,
        }),
    )?;
    Ok(if passed { ExitCode::Success } else { ExitCode::CheckFailed })
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn random_path(rng: &mut ChaCha8Rng, steps: usize, dim: usize) -> SampledPath {
    let g = TimeGrid::new(1.0, steps).unwrap();
    let values = (0..=steps)
        .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-3.0..3.0)))
        .collect();
    SampledPath::new(g, values).unwrap()
}

fn scalar(values: &[f64]) -> SampledPath {
    SampledPath::scalar(TimeGrid::new(1.0, values.len() - 1).unwrap(), values).unwrap()
}

fn var(path: &SampledPath, p: f64) -> f64 {
    p_variation(path, p).expect("p >= 1")
}

fn roughpath(seed: u64) -> Vec<Check> {
    const S: &str = "roughpath";
    let mut out = Vec::new();

    let mut r = rng(seed, 1);
    let mut worst = 0.0f64;
    for k in 0..50 {
        let steps = if k == 0 { 10 } else { r.random_range(1..=12) };
        let dim = if k % 2 == 0 { 1 } else { 3 };
        let path = random_path(&mut r, steps, dim);
        let p = r.random_range(1.0..4.0);
        let exact = brute_force_p_variation(&path, p).expect("small grid");
        worst = worst.max((var(&path, p) - exact).abs() / (1.0 + exact));
    }
    out.push(check(S, "p_variation equals brute-force enumeration (50 paths)", worst, below(1e-12)));

    // Each inequality: the largest lhs - rhs over 100 random scalar paths.
    let mut r = rng(seed, 2);
    let (mut mono, mut interp, mut product, mut chain, mut ac) = (f64::MIN, f64::MIN, f64::MIN, f64::MIN, f64::MIN);
    for _ in 0..100 {
        let steps = r.random_range(2..40);
        let y = random_path(&mut r, steps, 1);
        let x = random_path(&mut r, steps, 1);
        let q = r.random_range(1.0..3.0);
        let p = q + r.random_range(0.01..3.0);
        mono = mono.max(var(&y, p) - var(&y, q));
        interp = interp.max(var(&y, p) - var(&y, q).powf(q / p) * oscillation(&y).powf(1.0 - q / p));
        let prod = SampledPath::new(*y.grid(), y.values().iter().zip(x.values()).map(|(a, b)| a.component_mul(b)).collect())
            .unwrap();
        product = product.max(var(&prod, p) - (var(&x, p) * y.sup_norm() + var(&y, p) * x.sup_norm()));
        let kappa = r.random_range(0.2..1.0);
        let pk = p.max(1.0 / kappa);
        let image = y.map(|_, v| v.map(|c| c.abs().powf(kappa))).unwrap();
        chain = chain.max(var(&image, pk) - (var(&y, (kappa * pk).max(1.0)).powf(kappa) + 1.0));
        let length: f64 = (0..steps).map(|i| y.increment(i).norm()).sum();
        ac = ac.max(var(&y, p) - length);
    }
    for (name, v) in [
        ("monotonicity in p", mono),
        ("interpolation inequality", interp),
        ("product rule", product),
        ("chain rule with |x|^kappa", chain),
        ("piecewise-linear bound by length", ac),
    ] {
        out.push(check(S, format!("{name}: max lhs - rhs (100 paths)"), v, below(1e-12)));
    }

    let mut r = rng(seed, 3);
    let (mut young, mut parts) = (f64::MIN, 0.0f64);
    for _ in 0..100 {
        let steps = r.random_range(2..40);
        let (xs, ys): (Vec<f64>, Vec<f64>) = (0..=steps).map(|_| (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0))).unzip();
        let (x, y) = (scalar(&xs), scalar(&ys));
        let xm = MatrixPath::from_scalar(&x).unwrap();
        let b = young_bound_check(&xm, &y, 1.5, 1.5).unwrap();
        young = young.max(b.lhs - b.rhs);
        let ydx = young_integral(&MatrixPath::from_scalar(&y).unwrap(), &x, Tag::Midpoint).unwrap()[0];
        let xdy = young_integral(&xm, &y, Tag::Midpoint).unwrap()[0];
        parts = parts.max((xdy + ydx - (xs[steps] * ys[steps] - xs[0] * ys[0])).abs());
    }
    out.push(check(S, "Young bound: max lhs - rhs (100 pairs, p = q = 1.5)", young, below(1e-12)));
    out.push(check(S, "integration by parts with midpoint sums", parts, below(1e-10)));

    let ratios: Vec<f64> = (0..20u64)
        .into_par_iter()
        .map(|k| {
            let w = sample_wiener(TimeGrid::new(1.0, 2048).unwrap(), 1, seed.wrapping_add(k));
            let coarse = w.subsample(2).unwrap();
            let gap = |w: &SampledPath| {
                let x = MatrixPath::from_fn(*w.grid(), |t| DMatrix::from_element(1, 1, t.sin())).unwrap();
                (young_integral(&x, w, Tag::Left).unwrap()[0] - young_integral(&x, w, Tag::Midpoint).unwrap()[0]).abs()
            };
            gap(&coarse) / gap(&w)
        })
        .collect();
    let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    out.push(check(S, "left/midpoint gap shrink factor under refinement (min of 20)", min, Bound::AtLeast { value: 1.3 }));

    let g = TimeGrid::new(1.0, 16).unwrap();
    let n = 10_000u64;
    let samples: Vec<f64> = (0..n).map(|k| sample_wiener_stream(g, 1, seed, k).last()[0]).collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let variance = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    out.push(check(S, "Wiener variance at T = 1: |var - 1|", (variance - 1.0).abs(), below(0.05)));

    for c in wiener_dichotomy(seed) {
        out.push(c);
    }
    out
}

/// Ratios `Var_p(W on 2N) / Var_p(W on N)` for 20 seeds.
pub fn wiener_variation_ratios(seed: u64, p: f64, n: usize) -> Vec<f64> {
    (0..20u64)
        .into_par_iter()
        .map(|k| {
            let w = sample_wiener(TimeGrid::new(1.0, 2 * n).unwrap(), 1, seed.wrapping_add(k));
            var(&w, p) / var(&w.subsample(2).unwrap(), p)
        })
        .collect()
}

fn wiener_dichotomy(seed: u64) -> Vec<Check> {
    const S: &str = "roughpath";
    let stable = wiener_variation_ratios(seed, 2.5, 2048);
    let grow = wiener_variation_ratios(seed, 1.5, 2048);
    let lo = stable.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = stable.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let grow_min = grow.iter().cloned().fold(f64::INFINITY, f64::min);
    vec![
        check(S, "Wiener 2.5-variation refinement ratio (min of 20)", lo, Bound::Within { lo: 0.8, hi: 1.25 }),
        check(S, "Wiener 2.5-variation refinement ratio (max of 20)", hi, Bound::Within { lo: 0.8, hi: 1.25 }),
        check(S, "Wiener 1.5-variation refinement ratio (min of 20)", grow_min, Bound::AtLeast { value: 1.3 }),
    ]
}

pub(crate) fn quadratic_cost(grid: &TimeGrid, n: usize, m: usize, r: f64, s: DMatrix<f64>) -> QuadraticCost {
    build_minimum_energy(
        QuadraticCostSpec {
            h: Arc::new(CoordinateProjection::full(n)),
            r: MatrixFn::Constant(DMatrix::identity(n, n) * r),
            s: MatrixFn::Constant(s),
            control_dim: m,
        },
        grid,
    )
    .expect("valid quadratic cost")
}

fn lorenz() -> Lorenz63 {
    Lorenz63::new(Lorenz63Params::default()).expect("default parameters")
}

fn attractor_state() -> DVector<f64> {
    let g = TimeGrid::new(5.0, 5000).unwrap();
    integrate_state(&lorenz(), &ControlPath::zeros(g, 3), &DVector::from_element(3, 1.0))
        .expect("bounded spin-up")
        .last()
        .clone()
}

/// Lorenz'63 truth and fully observed `eta` with noise 0.1.
fn lorenz_twin(horizon: f64, n: usize, seed: u64) -> (TimeGrid, DVector<f64>, SampledPath) {
    let grid = TimeGrid::new(horizon, n).unwrap();
    let xi = attractor_state();
    let truth = integrate_state(&lorenz(), &ControlPath::zeros(grid, 3), &xi).expect("bounded truth");
    let eta = build_observation(&cumulative_trapezoid(&truth), 0.1, seed).unwrap().path;
    (grid, xi, eta)
}

fn adjoint(seed: u64) -> Result<Vec<Check>, CliError> {
    const S: &str = "adjoint";
    let mut out = Vec::new();

    // x' = a x, phi = x^2 / 2: lambda(t) = xi e^{-a t} (e^{2aT} - e^{2at}) / (2a).
    let (a, xi, horizon) = (-0.7, 1.3, 1.0);
    let grid = TimeGrid::new(horizon, 256).unwrap();
    let model = LinearModel::scalar(a);
    let cost = quadratic_cost(&grid, 1, 1, 1.0, DMatrix::identity(1, 1));
    let u = ControlPath::zeros(grid, 1);
    let x = integrate_state(&model, &u, &DVector::from_element(1, xi))?;
    let eta = SampledPath::zeros(grid, 1);
    let lambda = solve_costate(&model, &cost, &x, &u, &eta)?;
    let err = (0..grid.n_nodes())
        .map(|i| {
            let t = grid.time(i);
            let exact = xi * (-a * t).exp() * ((2.0 * a * horizon).exp() - (2.0 * a * t).exp()) / (2.0 * a);
            (lambda.value(i)[0] - exact).abs()
        })
        .fold(0.0, f64::max);
    out.push(check(S, "scalar costate against closed form", err, below(1e-4)));

    let (grid, xi, eta) = lorenz_twin(1.0, 256, seed);
    let model = lorenz();
    let cost = quadratic_cost(&grid, 3, 3, 1.0, DMatrix::identity(3, 3));
    let mut r = rng(seed, 4);
    let u = ControlPath::from_intervals(
        grid,
        (0..grid.n_steps()).map(|_| DVector::from_fn(3, |_, _| r.random_range(-1.0..1.0))).collect(),
    )?;
    let x = integrate_state(&model, &u, &xi)?;
    let lambda = solve_costate(&model, &cost, &x, &u, &eta)?;
    out.push(check(S, "terminal costate |lambda(T)|", lambda.terminal().norm(), below(1e-12)));

    let set = ControlSet::AllSpace;
    let best: Vec<DVector<f64>> = (0..grid.n_steps())
        .map(|i| interval_minimizer(&cost, &model, &set, &x, &lambda, i).expect("quadratic cost"))
        .collect();
    let triple = OptimalTriple {
        x: x.clone(),
        u: ControlPath::from_intervals(grid, best)?,
        lambda: lambda.clone(),
    };
    let residual = max_principle_residual(&triple, &cost, &model, &set, Probe::Auto)?;
    out.push(check(S, "maximum-principle residual at the closed-form control", residual, below(1e-12)));

    // argmin_v H against a grid search on a random 2-d instance.
    let a2 = DMatrix::from_fn(2, 2, |_, _| r.random_range(-1.0..1.0));
    let b2 = DMatrix::from_fn(2, 2, |_, _| r.random_range(-1.0..1.0));
    let model2 = LinearModel::new(a2, b2)?;
    let l = DMatrix::from_fn(2, 2, |_, _| r.random_range(-0.5..0.5));
    let s2 = &l * l.transpose() + DMatrix::identity(2, 2);
    let g1 = TimeGrid::new(1.0, 1).unwrap();
    let cost2 = quadratic_cost(&g1, 2, 2, 1.0, s2);
    let (x0, lam) = (
        DVector::from_fn(2, |_, _| r.random_range(-1.0..1.0)),
        DVector::from_fn(2, |_, _| r.random_range(-1.0..1.0)),
    );
    let closed = hamiltonian_minimizer(&cost2, &model2, &set, 0.0, &x0, &lam).expect("quadratic cost");
    // Dense grid over [-3, 3]^2, independent of the closed form.
    let step = 0.005;
    let mut grid_best = (f64::INFINITY, DVector::zeros(2));
    for i in -600..=600 {
        for j in -600..=600 {
            let v = DVector::from_vec(vec![i as f64 * step, j as f64 * step]);
            let h = hamiltonian(&cost2, &model2, 0.0, &x0, &lam, &v);
            if h < grid_best.0 {
                grid_best = (h, v);
            }
        }
    }
    out.push(check(S, "Hamiltonian closed-form minimiser against grid search", (grid_best.1 - closed).amax(), below(step)));

    let jac = (0..20)
        .map(|_| {
            let p = DVector::from_fn(3, |_, _| r.random_range(-20.0..20.0));
            jacobian_fd_error(&model, 0.0, &p)
        })
        .fold(0.0, f64::max);
    out.push(check(S, "Lorenz'63 Jacobian against finite differences (relative)", jac, below(1e-4)));
    Ok(out)
}

/// Random smooth `(M, a, b)` with `n = 2`.
pub struct DualityInstance {
    m: [[(f64, f64, f64); 2]; 2],
    a: [(f64, f64); 2],
    b: [(f64, f64); 2],
    zeta0: DVector<f64>,
    lambda_t: DVector<f64>,
}

impl DualityInstance {
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed, 5);
        let mut c = || r.random_range(-1.0..1.0);
        let mut entry = || (c(), c(), 3.0 * c());
        let m = [[entry(), entry()], [entry(), entry()]];
        let mut c = || r.random_range(-1.0..1.0);
        let mut wave = || (c(), 4.0 * c());
        let (a, b) = ([wave(), wave()], [wave(), wave()]);
        let mut c = || r.random_range(-1.0..1.0);
        Self {
            m,
            a,
            b,
            zeta0: DVector::from_vec(vec![c(), c()]),
            lambda_t: DVector::from_vec(vec![c(), c()]),
        }
    }

    pub fn residual(&self, n: usize) -> Result<f64, CliError> {
        let g = TimeGrid::new(1.0, n).map_err(CliError::from_spec)?;
        let m = MatrixPath::from_fn(g, |t| {
            DMatrix::from_fn(2, 2, |r, k| {
                let (c0, c1, w) = self.m[r][k];
                c0 + c1 * (w * t).sin()
            })
        })?;
        let wave = |coef: &[(f64, f64); 2]| SampledPath::from_fn(g, |t| DVector::from_fn(2, |r, _| coef[r].0 * (coef[r].1 * t).sin()));
        Ok(duality_check(&m, &wave(&self.a)?, &wave(&self.b)?, &self.zeta0, &self.lambda_t)?)
    }
}

fn duality(seed: u64) -> Result<Vec<Check>, CliError> {
    const S: &str = "duality";
    let rows: Vec<(f64, f64)> = (0..20u64)
        .into_par_iter()
        .map(|k| {
            let inst = DualityInstance::random(seed.wrapping_add(k));
            Ok((inst.residual(512)?, inst.residual(1024)?))
        })
        .collect::<Result<_, CliError>>()?;
    let mut out: Vec<Check> = rows
        .iter()
        .enumerate()
        .map(|(k, (c, _))| check(S, format!("residual at 512 steps, instance {k}"), *c, below(1e-3)))
        .collect();
    let worst = rows.iter().map(|(c, f)| f / c).fold(0.0, f64::max);
    out.push(check(S, "largest residual ratio 1024 / 512 steps", worst, below(1.0)));
    Ok(out)
}

/// Node-wise relative error of the costate gradient against central
/// differences of the discretised cost, at `count` random intervals.
pub fn gradient_fd_errors(seed: u64, count: usize, h: f64) -> Result<Vec<f64>, CliError> {
    let (grid, xi, eta) = lorenz_twin(2.0, 1024, seed);
    let model = lorenz();
    let cost = quadratic_cost(&grid, 3, 3, 1.0, DMatrix::identity(3, 3));
    let u = ControlPath::zeros(grid, 3);
    let x = integrate_state(&model, &u, &xi)?;
    let lambda = solve_costate(&model, &cost, &x, &u, &eta)?;
    let g = control_gradient(&model, &cost, &x, &u, &lambda)?;
    let mut r = rng(seed, 6);
    let nodes: Vec<usize> = (0..count).map(|_| r.random_range(0..grid.n_steps())).collect();
    let dt = grid.dt();
    nodes
        .par_iter()
        .map(|&i| {
            let fd = DVector::from_fn(3, |k, _| {
                let side = |sign: f64| {
                    let mut vals = u.intervals()[..grid.n_steps()].to_vec();
                    vals[i][k] += sign * h;
                    let up = ControlPath::from_intervals(grid, vals).expect("finite");
                    let xp = integrate_state(&model, &up, &xi).expect("bounded");
                    eval_cost(&cost, &xp, &up, &eta).expect("finite")
                };
                (side(1.0) - side(-1.0)) / (2.0 * h * dt)
            });
            Ok((g.value(i) - &fd).norm() / fd.norm())
        })
        .collect()
}

fn gradient(seed: u64) -> Result<Vec<Check>, CliError> {
    Ok(gradient_fd_errors(seed, 20, 1e-5)?
        .into_iter()
        .enumerate()
        .map(|(k, e)| check("gradient", format!("relative FD gap at random node {k}"), e, below(1e-3)))
        .collect())
}

fn valueprobe(seed: u64) -> Result<Vec<Check>, CliError> {
    const S: &str = "valueprobe";
    let mut out = Vec::new();
    let lq = ScalarLq::new(0.5, 1.0, 1.0, 1.0)?;
    let grid = TimeGrid::new(1.0, 1024).unwrap();
    let model = LinearModel::scalar(lq.a);
    let cost = quadratic_cost(&grid, 1, 1, lq.q, DMatrix::from_element(1, 1, lq.r));
    let eta = SampledPath::zeros(grid, 1);
    let set = ControlSet::AllSpace;
    let problem = Problem::new(&model, &cost, &eta, &set);
    let xi = DVector::from_element(1, 1.0);
    for (name, solver) in [
        ("gradient", Solver::Gradient(OptimizerConfig::default())),
        ("shooting", Solver::Shoot(ShootingConfig::default())),
    ] {
        let p = value_probe(&problem, &xi, 1e-4, &solver)?;
        out.push(check(S, format!("scalar LQ |dV - lambda(0)| ({name})"), p.max_abs_gap, below(1e-3)));
        out.push(check(
            S,
            format!("scalar LQ |lambda(0) - P(0) xi| ({name})"),
            (p.lambda0[0] - lq.costate0(1.0)).abs(),
            below(1e-3),
        ));
    }

    let model = lorenz();
    let probes: Vec<(f64, f64)> = (0..3u64)
        .into_par_iter()
        .map(|k| {
            let (grid, xi, eta) = lorenz_twin(0.5, 512, seed.wrapping_add(k));
            let cost = quadratic_cost(&grid, 3, 3, 1.0, DMatrix::identity(3, 3));
            let problem = Problem::new(&model, &cost, &eta, &set);
            let xi = xi + DVector::from_vec(vec![0.5, 0.5, -0.5]);
            let p = value_probe(&problem, &xi, 1e-4, &Solver::Gradient(OptimizerConfig::default()))?;
            Ok((p.max_abs_gap, p.lambda0.norm()))
        })
        .collect::<Result<_, CliError>>()?;
    for (k, (gap, l0)) in probes.into_iter().enumerate() {
        out.push(check(
            S,
            format!("Lorenz'63 T = 0.5 |dV - lambda(0)| / (1 + |lambda(0)|), seed offset {k}"),
            gap / (1.0 + l0),
            below(1e-2),
        ));
    }
    Ok(out)
}
