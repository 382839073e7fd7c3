mod common;

use common::{duopoly, small_instance};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgne_core::diagnostics::{
    kkt_residual, natural_residual, normalized_distance, per_agent_kkt_residual, project_feasible, solve_reference,
    solve_reference_from,
};
use sgne_core::GameSpec;

fn feasible(spec: &GameSpec, y: &[f64], tol: f64) -> bool {
    spec.contains_local(y, tol)
        && spec
            .total_supply(y)
            .iter()
            .zip(&spec.coupling().cap)
            .all(|(s, b)| *s <= b + tol)
}

#[test]
fn reference_certifies_itself_and_is_start_independent() {
    for seed in 0..8 {
        let (spec, _) = small_instance(2 + seed as usize % 4, 1 + seed as usize % 3, seed, true);
        let r = solve_reference(&spec).unwrap();
        assert!(r.residual.max() <= 1e-10);
        assert_eq!(r.residual, kkt_residual(&spec, &r.x_star, &r.lam_star).unwrap());
        let upper: Vec<f64> = spec.agents().iter().flat_map(|a| a.omega.upper.clone()).collect();
        let other = solve_reference_from(&spec, &upper, &vec![5.0; spec.m()]).unwrap();
        assert!(common::rel_dist(&other.x_star, &r.x_star) < 1e-8, "seed {seed}");
    }
}

#[test]
fn natural_residual_vanishes_only_at_the_equilibrium() {
    let (spec, _) = small_instance(4, 2, 5, true);
    let r = solve_reference(&spec).unwrap();
    for step in [0.1, 1.0, 10.0] {
        assert!(natural_residual(&spec, &r.x_star, step).unwrap() <= 1e-8);
    }
    assert!(natural_residual(&spec, &vec![0.0; spec.n()], 1.0).unwrap() > 1e-3);
    assert!(natural_residual(&spec, &r.x_star, 0.0).is_err());
}

#[test]
fn common_and_per_agent_residuals_agree_for_equal_duals() {
    let (spec, _) = small_instance(3, 2, 2, true);
    let r = solve_reference(&spec).unwrap();
    let x: Vec<f64> = r.x_star.iter().map(|v| v * 0.9).collect();
    let common = kkt_residual(&spec, &x, &r.lam_star).unwrap();
    let per = per_agent_kkt_residual(&spec, &x, &vec![r.lam_star.clone(); 3]).unwrap();
    assert_eq!(common, per);
    let mut unequal = vec![r.lam_star.clone(); 3];
    unequal[1][0] += 0.3;
    assert!((per_agent_kkt_residual(&spec, &x, &unequal).unwrap().consensus - 0.3).abs() < 1e-12);
}

#[test]
fn stationarity_grows_linearly_in_a_dual_perturbation() {
    let spec = duopoly(0.5, 0.0);
    let x = [0.25, 0.25];
    let lam_star = vec![0.9];
    let at = |eps: f64| {
        let duals = vec![vec![0.9 + eps], lam_star.clone()];
        per_agent_kkt_residual(&spec, &x, &duals).unwrap().stationarity[0]
    };
    assert!(at(0.0) < 1e-12);
    let h = 1e-3;
    for eps in [0.01, 0.05, 0.1] {
        let slope = (at(eps + h) - at(eps - h)) / (2.0 * h);
        assert!((slope - 1.0).abs() < 1e-9);
        assert!((at(eps) - eps).abs() < 1e-12);
    }
}

#[test]
fn primal_violation_and_normalized_distance_by_construction() {
    let spec = duopoly(0.5, 0.0);
    let k = kkt_residual(&spec, &[0.5, 0.5], &[0.0]).unwrap();
    assert!((k.primal_violation - 0.5).abs() < 1e-15);
    let x = [0.3, -1.2, 2.0];
    let doubled: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
    assert_eq!(normalized_distance(&x, &x).unwrap(), 0.0);
    assert!((normalized_distance(&doubled, &x).unwrap() - 1.0).abs() < 1e-15);
    assert!(normalized_distance(&x, &[0.0; 3]).is_err());
}

#[test]
fn feasible_projection_beats_every_grid_point() {
    // Two firms, one market: the feasible set is a clipped triangle in 2-D.
    let spec = duopoly(0.8, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid: Vec<[f64; 2]> = (0..=160)
        .flat_map(|a| (0..=160).map(move |b| [a as f64 * 0.005, b as f64 * 0.005]))
        .filter(|p| p[0] + p[1] <= 0.8 + 1e-12)
        .collect();
    for _ in 0..25 {
        let v = [rng.random_range(-1.0..2.0), rng.random_range(-1.0..2.0)];
        let p = project_feasible(&spec, &v).unwrap();
        assert!(feasible(&spec, &p, 1e-12));
        let d = |q: &[f64]| (q[0] - v[0]).powi(2) + (q[1] - v[1]).powi(2);
        let best = grid.iter().map(|q| d(q)).fold(f64::INFINITY, f64::min);
        assert!(d(&p) <= best + 1e-12, "{v:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn feasible_projection_is_idempotent_and_nonexpansive(seed in 0u64..1000, scale in 0.1f64..5.0) {
        let (spec, _) = small_instance(4, 3, seed % 7, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..spec.n()).map(|_| rng.random_range(-scale..scale)).collect();
        let v: Vec<f64> = (0..spec.n()).map(|_| rng.random_range(-scale..scale)).collect();
        let pu = project_feasible(&spec, &u).unwrap();
        let pv = project_feasible(&spec, &v).unwrap();
        prop_assert!(feasible(&spec, &pu, 1e-12));
        let again = project_feasible(&spec, &pu).unwrap();
        prop_assert!(common::dist(&again, &pu) <= 1e-12);
        prop_assert!(common::dist(&pu, &pv) <= common::dist(&u, &v) + 1e-12);
    }
}
