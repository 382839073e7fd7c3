mod common;

use common::{duopoly, fixed_point, phi_norm, rel_dist, small_instance};
use sgne_core::diagnostics::{kkt_residual, per_agent_kkt_residual, solve_reference};
use sgne_core::game::{AgentSpec, BoxSet, CouplingConstraints, GameSpec, PriceModel};
use sgne_core::operators::{Execution, Preconditioner, StepSizes};
use sgne_core::solver::{run, BoundPolicy, GradientMode, RunStreams, Solver, SolverParams, Termination};
use sgne_core::{DualGraph, Error};

fn exact_params(spec: &GameSpec, g: &DualGraph) -> SolverParams {
    let mut p = SolverParams::for_instance(spec, g, GradientMode::Exact).unwrap();
    p.max_iters = 200_000;
    p.tol = 1e-12;
    p
}

#[test]
fn single_agent_reaches_its_clipped_minimizer() {
    // J = |x|^2 - 3 x, minimizer 1.5 clipped to the box [0, 1]; no market.
    let agent = AgentSpec {
        omega: BoxSet::new(vec![0.0], vec![1.0]).unwrap(),
        quad_coeff: 1.0,
        lin_coeff: vec![-3.0],
        markets: vec![None],
    };
    let spec = GameSpec::new(
        vec![agent],
        CouplingConstraints::equal_split(vec![1.0], 1),
        PriceModel {
            base_price: vec![1.0],
            slope_mean: vec![1.0],
            slope_std: vec![0.0],
        },
    )
    .unwrap();
    let g = DualGraph::from_edges(1, &[]).unwrap();
    let report = run(&spec, &g, exact_params(&spec, &g), None).unwrap();
    assert_eq!(report.termination, Termination::Converged);
    assert!((report.terminal.x[0] - 1.0).abs() < 1e-9);
}

#[test]
fn slack_duopoly_matches_closed_form() {
    // 4.4 x - 2 = 0 per firm when the cap does not bind.
    let spec = duopoly(5.0, 0.0);
    let g = DualGraph::cycle_plus_chords(2, &[]).unwrap();
    let report = run(&spec, &g, exact_params(&spec, &g), None).unwrap();
    for x in &report.terminal.x {
        assert!((x - 2.0 / 4.4).abs() < 1e-8);
    }
    assert!(report.terminal.lam.iter().all(|l| l.abs() < 1e-8));
}

#[test]
fn binding_duopoly_matches_oracle_and_shares_the_multiplier() {
    let spec = duopoly(0.5, 0.0);
    let g = DualGraph::cycle_plus_chords(2, &[]).unwrap();
    let report = run(&spec, &g, exact_params(&spec, &g), None).unwrap();
    let reference = solve_reference(&spec).unwrap();
    assert!(rel_dist(&report.terminal.x, &reference.x_star) < 1e-6);
    for x in &report.terminal.x {
        assert!((x - 0.25).abs() < 1e-7);
    }
    // 4.4 * 0.25 - 2 + lambda = 0
    for l in &report.terminal.lam {
        assert!((l - 0.9).abs() < 1e-6);
    }
}

#[test]
fn random_instances_match_oracle() {
    for seed in 0..6 {
        let (spec, g) = small_instance(2 + seed as usize % 4, 1 + seed as usize % 2, seed, true);
        let report = run(&spec, &g, exact_params(&spec, &g), None).unwrap();
        assert_eq!(report.termination, Termination::Converged, "seed {seed}");
        let reference = solve_reference(&spec).unwrap();
        assert!(rel_dist(&report.terminal.x, &reference.x_star) < 1e-6, "seed {seed}");
        let m = spec.m();
        let duals: Vec<Vec<f64>> = report.terminal.lam.chunks(m).map(<[f64]>::to_vec).collect();
        let kkt = per_agent_kkt_residual(&spec, &report.terminal.x, &duals).unwrap();
        assert!(kkt.max() < 1e-8, "seed {seed}: {kkt:?}");
    }
}

#[test]
fn iterates_stay_in_boxes_with_nonnegative_duals() {
    let (spec, g) = small_instance(4, 2, 3, false);
    let mut p = SolverParams::for_instance(&spec, &g, GradientMode::IndependentBatches).unwrap();
    p.delta = 0.7;
    let solver = Solver::new(&spec, &g, p).unwrap();
    let mut streams = RunStreams::new(5, spec.n_agents());
    let mut s = solver.initial_state(&mut streams.init);
    for k in 0..300 {
        assert!(spec.contains_local(&s.x, 0.0));
        assert!(s.lam.iter().all(|&l| l >= 0.0));
        s = solver.iterate_once(&s, k, &mut streams).0;
    }
}

#[test]
fn preconditioned_distance_to_a_fixed_point_does_not_grow() {
    for seed in [1, 4] {
        let (spec, g) = small_instance(3, 2, seed, true);
        let reference = solve_reference(&spec).unwrap();
        let star = fixed_point(&spec, &g, &reference.x_star, &reference.lam_star);
        let p = exact_params(&spec, &g);
        let phi = Preconditioner::build(&spec, &g, &p.steps).unwrap().matrix;
        let solver = Solver::new(&spec, &g, p).unwrap();
        let mut streams = RunStreams::new(seed, spec.n_agents());
        let mut s = solver.initial_state(&mut streams.init);
        let mut prev = phi_norm(&phi, &s, &star);
        for k in 0..2000 {
            s = solver.iterate_once(&s, k, &mut streams).0;
            let d = phi_norm(&phi, &s, &star);
            assert!(d <= prev * (1.0 + 1e-9) + 1e-12, "seed {seed} iter {k}: {d} > {prev}");
            prev = d;
        }
    }
}

#[test]
fn runs_are_reproducible_and_execution_mode_independent() {
    let (spec, g) = small_instance(5, 2, 2, false);
    let mut p = SolverParams::for_instance(&spec, &g, GradientMode::IndependentBatches).unwrap();
    p.max_iters = 150;
    p.tol = 0.0;
    let a = run(&spec, &g, p.clone(), None).unwrap();
    let b = run(&spec, &g, p.clone(), None).unwrap();
    assert_eq!(a.to_csv_string(), b.to_csv_string());
    let mut par = p.clone();
    par.execution = Execution::PhaseParallel;
    let c = run(&spec, &g, par, None).unwrap();
    assert_eq!(a.terminal, c.terminal);
    assert_eq!(a.to_csv_string(), c.to_csv_string());
    let mut other = p;
    other.seed = 1;
    assert_ne!(run(&spec, &g, other, None).unwrap().terminal, a.terminal);
}

#[test]
fn shared_batch_mode_converges_too() {
    let (spec, g) = small_instance(3, 2, 7, false);
    let reference = solve_reference(&spec).unwrap();
    let mut p = SolverParams::for_instance(&spec, &g, GradientMode::SharedBatch).unwrap();
    p.max_iters = 3000;
    p.tol = 0.0;
    let report = run(&spec, &g, p, Some(&reference.x_star)).unwrap();
    assert!(report.last().norm_dist.unwrap() < 1e-2);
}

#[test]
fn different_starts_reach_the_same_equilibrium() {
    let (spec, g) = small_instance(4, 2, 11, true);
    let mut finals = Vec::new();
    for seed in 0..4 {
        let mut p = exact_params(&spec, &g);
        p.seed = seed;
        finals.push(run(&spec, &g, p, None).unwrap().terminal.x);
    }
    for x in &finals[1..] {
        assert!(rel_dist(x, &finals[0]) < 1e-7);
    }
}

#[test]
fn terminal_duals_agree_across_agents() {
    let (spec, g) = small_instance(5, 2, 13, true);
    let report = run(&spec, &g, exact_params(&spec, &g), None).unwrap();
    assert!(report.last().consensus < 1e-8);
    let mean = report.terminal.mean_dual(spec.n_agents(), spec.m());
    assert!(kkt_residual(&spec, &report.terminal.x, &mean).unwrap().max() < 1e-8);
}

#[test]
fn no_agent_gains_on_a_grid_of_unilateral_deviations() {
    // Three firms in one binding market: at a variational equilibrium no
    // firm can lower its cost by a feasible unilateral deviation.
    let (spec, g) = small_instance(3, 1, 21, true);
    let x = run(&spec, &g, exact_params(&spec, &g), None).unwrap().terminal.x;
    let mean = spec.price().slope_mean.clone();
    let cap = spec.coupling().cap[0];
    for i in 0..spec.n_agents() {
        assert_eq!(spec.agent(i).dim(), 1);
        let k = spec.block(i).start;
        let others: f64 = spec.total_supply(&x)[0] - x[k];
        let hi = spec.agent(i).omega.upper[0].min(cap - others);
        let base = spec.eval_cost(i, &x, &mean).unwrap();
        for step in 0..=2000 {
            let v = hi * step as f64 / 2000.0;
            let mut y = x.clone();
            y[k] = v;
            assert!(
                spec.eval_cost(i, &y, &mean).unwrap() >= base - 1e-9,
                "agent {i} gains at {v}"
            );
        }
    }
}

#[test]
fn invalid_parameters_are_rejected() {
    let (spec, g) = small_instance(3, 1, 0, true);
    let base = exact_params(&spec, &g);
    let mut p = base.clone();
    p.delta = 0.0;
    assert!(matches!(Solver::new(&spec, &g, p), Err(Error::Config(_))));
    let mut p = base.clone();
    p.steps = StepSizes::uniform(3, 10.0, 10.0, 10.0);
    assert!(matches!(Solver::new(&spec, &g, p.clone()), Err(Error::Config(_))));
    p.bound_policy = BoundPolicy::Record;
    let solver = Solver::new(&spec, &g, p).unwrap();
    assert_eq!(solver.bound_violations().len(), 9);
    let mut p = base;
    p.steps = StepSizes::uniform(2, 0.1, 0.1, 0.1);
    assert!(matches!(Solver::new(&spec, &g, p), Err(Error::Dimension { .. })));
    let disconnected = DualGraph::from_edges(3, &[sgne_core::Edge { i: 0, j: 1, w: 1.0 }]).unwrap();
    assert!(matches!(
        Solver::new(&spec, &disconnected, exact_params(&spec, &g)),
        Err(Error::Disconnected)
    ));
}

#[test]
fn max_iters_is_reported() {
    let (spec, g) = small_instance(3, 2, 1, true);
    let mut p = exact_params(&spec, &g);
    p.max_iters = 5;
    let report = run(&spec, &g, p, None).unwrap();
    assert_eq!(report.termination, Termination::MaxIters);
    assert_eq!(report.records.len(), 6);
    assert_eq!(report.last().iter, 5);
}

#[test]
fn csv_has_the_contract_header_and_nan_without_reference() {
    let (spec, g) = small_instance(2, 1, 1, false);
    let mut p = SolverParams::for_instance(&spec, &g, GradientMode::IndependentBatches).unwrap();
    p.max_iters = 3;
    p.tol = 0.0;
    let csv = run(&spec, &g, p, None).unwrap().to_csv_string();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("iter,batch,nat_residual,consensus,constraint_violation,norm_dist")
    );
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0], "0");
    assert_eq!(first[1], "12");
    assert_eq!(first[5], "NaN");
    assert_eq!(csv.lines().count(), 5);
}
