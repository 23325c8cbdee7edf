//! Lorenz'63 twin experiments: optimality certificates, cross-solver
//! agreement and cost identities.

mod common;

use std::sync::Arc;

use assim_core::adjoint::{interval_minimizer, max_principle_residual, Probe};
use assim_core::cost::{build_onsager_machlup, eval_cost, eval_cost_by_parts, OnsagerMachlupSpec};
use assim_core::dynamics::{integrate_state, ControlPath};
use assim_core::hamiltonian_bvp::{integrate_hamiltonian, shoot, value_probe, ShootingConfig, Solver};
use assim_core::optimizer::{minimize, ControlSet, OptimizerConfig, Status};
use assim_core::Problem;
use common::*;

#[test]
fn converged_twin_run_carries_both_certificates() {
    let tw = twin(2.0, 1024, &[0, 1, 2], 0.1, 0);
    let cost = lorenz_cost(&tw.grid, vec![0, 1, 2], 1.0, 1.0);
    let model = lorenz();
    let set = ControlSet::AllSpace;
    let problem = Problem::new(&model, &cost, &tw.eta, &set);
    let xi = &tw.xi_truth + v(&[1.0, -1.0, 1.0]);
    let r = minimize(&problem, &xi, &ControlPath::zeros(tw.grid, 3), &OptimizerConfig::default()).unwrap();
    assert_eq!(r.status, Status::Converged);
    assert!(r.cost_trace.windows(2).all(|w| w[1] < w[0]));
    let a = r.final_cost();
    assert!(r.mp_residual < 1e-3 * (1.0 + a.abs()), "{} vs {a}", r.mp_residual);
    let sampled = max_principle_residual(&r.triple, &cost, &model, &set, Probe::Samples(64)).unwrap();
    assert!(sampled <= r.mp_residual + 1e-12);

}

fn closed_form_gap(n: usize) -> f64 {
    let tw = twin(2.0, n, &[0, 1, 2], 0.1, 0);
    let cost = lorenz_cost(&tw.grid, vec![0, 1, 2], 1.0, 1.0);
    let model = lorenz();
    let set = ControlSet::AllSpace;
    let problem = Problem::new(&model, &cost, &tw.eta, &set);
    let xi = &tw.xi_truth + v(&[1.0, -1.0, 1.0]);
    let r = minimize(&problem, &xi, &ControlPath::zeros(tw.grid, 3), &OptimizerConfig::default()).unwrap();
    assert_eq!(r.status, Status::Converged);
    (0..n)
        .map(|i| {
            let best = interval_minimizer(&cost, &model, &set, &r.triple.x, &r.triple.lambda, i).unwrap();
            (best - r.triple.u.interval(i)).amax()
        })
        .fold(0.0, f64::max)
}

// The optimum of the trapezoid functional and the continuous closed form
// differ at second order in dt.
#[test]
fn closed_form_gap_is_second_order() {
    let (coarse, fine) = (closed_form_gap(512), closed_form_gap(1024));
    assert!(fine < 5e-3, "{fine}");
    assert!(coarse / fine > 3.0, "{coarse} / {fine}");
}

#[test]
fn shooting_agrees_with_projected_gradient_on_a_short_horizon() {
    let tw = twin(0.5, 512, &[0, 1, 2], 0.1, 4);
    let cost = lorenz_cost(&tw.grid, vec![0, 1, 2], 1.0, 1.0);
    let model = lorenz();
    let set = ControlSet::AllSpace;
    let problem = Problem::new(&model, &cost, &tw.eta, &set);
    let xi = &tw.xi_truth + v(&[0.5, 0.5, -0.5]);
    let grad = minimize(&problem, &xi, &ControlPath::zeros(tw.grid, 3), &OptimizerConfig::default()).unwrap();
    assert_eq!(grad.status, Status::Converged);
    let sh = shoot(&problem, &xi, &v(&[0.0, 0.0, 0.0]), &ShootingConfig::default()).unwrap();
    let j = eval_cost(&cost, &sh.triple.x, &sh.triple.u, &tw.eta).unwrap();
    assert!((j - grad.final_cost()).abs() < 1e-3, "{j} vs {}", grad.final_cost());
    assert!(sh.residual < ShootingConfig::default().newton_tol);

    // Round trip: lambda(0) regenerates the gradient triple through the
    // Hamiltonian flow. Forward costate growth rules this out on long horizons.
    let (x, lam) = integrate_hamiltonian(&problem, &xi, grad.triple.lambda.initial()).unwrap();
    assert!(x.sup_distance(&grad.triple.x).unwrap() < 1e-3);
    assert!(lam.path().sup_distance(grad.triple.lambda.path()).unwrap() < 1e-3);
}

#[test]
fn lorenz_value_probe_on_three_seeds() {
    let model = lorenz();
    let set = ControlSet::AllSpace;
    for seed in 0..3 {
        let tw = twin(0.5, 512, &[0, 1, 2], 0.1, seed);
        let cost = lorenz_cost(&tw.grid, vec![0, 1, 2], 1.0, 1.0);
        let problem = Problem::new(&model, &cost, &tw.eta, &set);
        let xi = &tw.xi_truth + v(&[0.5, 0.5, -0.5]);
        let probe = value_probe(&problem, &xi, 1e-4, &Solver::Gradient(OptimizerConfig::default())).unwrap();
        let bound = 1e-2 * (1.0 + probe.lambda0.norm());
        assert!(probe.max_abs_gap < bound, "seed {seed}: {} vs {bound}", probe.max_abs_gap);
    }
}

#[test]
fn onsager_machlup_shifts_cost_by_divergence_times_horizon() {
    let tw = twin(2.0, 512, &[0], 0.1, 2);
    let me = lorenz_cost(&tw.grid, vec![0], 1.0, 1.0);
    let model = Arc::new(lorenz());
    let om = build_onsager_machlup(
        OnsagerMachlupSpec {
            base: me.spec().clone(),
            model: model.clone(),
            div_f: None,
        },
        &tw.grid,
    )
    .unwrap();
    let u = ControlPath::constant(tw.grid, v(&[0.3, -0.1, 0.2])).unwrap();
    let x = integrate_state(model.as_ref(), &u, &tw.xi_truth).unwrap();
    let gap = eval_cost(&om, &x, &u, &tw.eta).unwrap() - eval_cost(&me, &x, &u, &tw.eta).unwrap();
    let expected = (10.0 + 1.0 + 8.0 / 3.0) * 2.0;
    assert!((gap - expected).abs() < 1e-9 * expected, "{gap}");
}

#[test]
fn onsager_machlup_and_minimum_energy_minimisers_differ() {
    // With R depending on nothing and g = I the divergence shift is constant,
    // so a non-identity Gamma is what separates the two minimisers.
    let tw = twin(1.0, 256, &[0], 0.1, 6);
    let model = Arc::new(assim_core::dynamics::LinearModel::new(
        nalgebra::DMatrix::from_row_slice(3, 3, &[-1.0, 0.5, 0.0, 0.0, -0.5, 0.2, 0.1, 0.0, -2.0]),
        nalgebra::DMatrix::from_diagonal(&v(&[0.5, 1.0, 2.0])),
    )
    .unwrap());
    let me = lorenz_cost(&tw.grid, vec![0], 1.0, 1.0);
    let om = build_onsager_machlup(
        OnsagerMachlupSpec {
            base: me.spec().clone(),
            model: model.clone(),
            div_f: None,
        },
        &tw.grid,
    )
    .unwrap();
    let set = ControlSet::AllSpace;
    let xi = v(&[1.0, 0.0, -1.0]);
    let eta = tw.eta.map(|_, e| e * 0.01).unwrap();
    let run = |c: &dyn assim_core::Cost| {
        minimize(&Problem::new(model.as_ref(), c, &eta, &set), &xi, &ControlPath::zeros(tw.grid, 3), &OptimizerConfig::default())
            .unwrap()
    };
    let (rm, ro) = (run(&me), run(&om));
    assert_eq!(rm.status, Status::Converged);
    assert_eq!(ro.status, Status::Converged);
    let j = |c: &dyn assim_core::Cost, r: &assim_core::AssimilationResult| eval_cost(c, &r.triple.x, &r.triple.u, &eta).unwrap();
    assert!(j(&me, &ro) - j(&me, &rm) > 1e-9);
    assert!(j(&om, &rm) - j(&om, &ro) > 1e-9);
}

#[test]
fn by_parts_evaluator_converges_at_first_order() {
    let model = lorenz();
    let gap = |n: usize| {
        let tw = twin(1.0, n, &[0], 0.1, 8);
        let cost = lorenz_cost(&tw.grid, vec![0], 1.0, 1.0);
        let u = ControlPath::constant(tw.grid, v(&[0.5, 0.0, -0.5])).unwrap();
        let x = integrate_state(&model, &u, &tw.xi_truth).unwrap();
        (eval_cost(&cost, &x, &u, &tw.eta).unwrap() - eval_cost_by_parts(&cost, &model, &x, &u, &tw.eta).unwrap()).abs()
    };
    let gaps: Vec<f64> = [256, 512, 1024, 2048].iter().map(|&n| gap(n)).collect();
    for w in gaps.windows(2) {
        assert!(w[1] <= 0.5 * w[0] * 1.25, "{gaps:?}");
    }
}

#[test]
fn smooth_observation_term_matches_quadrature() {
    // Noise-free data: the Young sum of -x_1 against zeta = int x_1 equals
    // -int x_1^2 dt.
    let tw = twin(1.0, 2048, &[0], 0.0, 0);
    let cost = lorenz_cost(&tw.grid, vec![0], 1.0, 1.0);
    let parts = assim_core::cost::eval_cost_parts(&cost, &tw.truth, &ControlPath::zeros(tw.grid, 3), &tw.eta).unwrap();
    let dt = tw.grid.dt();
    let quad: f64 = (0..tw.grid.n_steps())
        .map(|i| 0.5 * dt * (tw.truth.value(i)[0].powi(2) + tw.truth.value(i + 1)[0].powi(2)))
        .sum();
    assert!((parts.stochastic + quad).abs() < 1e-3 * quad, "{} vs {}", parts.stochastic, -quad);
}
