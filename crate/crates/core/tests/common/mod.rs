//! Shared fixtures and dense reference computations for the integration tests.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use sgne_core::game::{AgentSpec, BoxSet, CouplingConstraints, GameSpec, PriceModel};
use sgne_core::graph::DualGraph;
use sgne_core::market::{generate_instance, instance_rng, BenchConfig};
use sgne_core::operators::{
    block_coupling_matrix, forward_apply, stacked_laplacian, IterateState, Preconditioner, StepSizes,
};

/// Two symmetric firms in one market with a binding or slack cap.
pub fn duopoly(cap: f64, slope_std: f64) -> GameSpec {
    let agent = AgentSpec {
        omega: BoxSet::new(vec![0.0], vec![10.0]).unwrap(),
        quad_coeff: 1.0,
        lin_coeff: vec![0.0],
        markets: vec![Some(0)],
    };
    GameSpec::new(
        vec![agent.clone(), agent],
        CouplingConstraints::equal_split(vec![cap], 2),
        PriceModel {
            base_price: vec![2.0],
            slope_mean: vec![0.8],
            slope_std: vec![slope_std],
        },
    )
    .unwrap()
}

pub fn small_instance(n: usize, m: usize, seed: u64, deterministic: bool) -> (GameSpec, DualGraph) {
    let mut cfg = BenchConfig::small(n, m, seed);
    cfg.deterministic = deterministic;
    generate_instance(&cfg, &mut instance_rng(seed)).unwrap()
}

pub fn paper_instance(seed: u64, deterministic: bool) -> (GameSpec, DualGraph) {
    let cfg = BenchConfig {
        seed,
        deterministic,
        ..BenchConfig::default()
    };
    generate_instance(&cfg, &mut instance_rng(seed)).unwrap()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

pub fn rel_dist(a: &[f64], b: &[f64]) -> f64 {
    dist(a, b) / b.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Backward step computed from dense matrices: with `rhs = Phi w - A_bar(w)`,
/// the block-lower-triangular system `(Phi + S) w~ + N(w~) = rhs` is solved
/// row block by row block.
pub fn dense_backward(
    spec: &GameSpec,
    g: &DualGraph,
    steps: &StepSizes,
    s: &IterateState,
    fhat: &[f64],
) -> IterateState {
    let n = spec.n();
    let m = spec.m();
    let nm = spec.n_agents() * m;
    let phi = Preconditioner::build(spec, g, steps).unwrap().matrix;
    let w = s.stacked();
    let fwd = DVector::from_vec(forward_apply(spec, g, s, fhat).unwrap());
    let rhs = &phi * &w - fwd;
    let a = block_coupling_matrix(spec);
    let l = stacked_laplacian(g, m);

    let mut x = vec![0.0; n];
    for i in 0..spec.n_agents() {
        for k in spec.block(i) {
            x[k] = steps.alpha[i] * rhs[k];
        }
        spec.agent(i).omega.project_in_place(&mut x[spec.block(i)]);
    }
    let z: Vec<f64> = (0..nm).map(|r| steps.nu[r / m] * rhs[n + r]).collect();
    let ax = &a * DVector::from_column_slice(&x);
    let lz = &l * DVector::from_column_slice(&z);
    let lam: Vec<f64> = (0..nm)
        .map(|r| (steps.sigma[r / m] * (rhs[n + nm + r] + 2.0 * ax[r] + 2.0 * lz[r])).max(0.0))
        .collect();
    IterateState { x, z, lam }
}

/// A fixed point of the backward step built from a variational equilibrium
/// `(x*, lambda*)`: every agent holds `lambda*`, and `z*` solves
/// `(L z)_i = b_i - A_i x_i* - (b - A x*) / N` (in the range of `L` because
/// the right-hand side sums to zero).
pub fn fixed_point(spec: &GameSpec, g: &DualGraph, x_star: &[f64], lam_star: &[f64]) -> IterateState {
    let n_agents = spec.n_agents();
    let m = spec.m();
    let supply = spec.total_supply(x_star);
    let mut rhs = DVector::zeros(n_agents * m);
    for i in 0..n_agents {
        let own = spec.agent_supply(i, &x_star[spec.block(i)]);
        for c in 0..m {
            let slack = spec.coupling().cap[c] - supply[c];
            rhs[i * m + c] = spec.coupling().slices[i][c] - own[c] - slack / n_agents as f64;
        }
    }
    let l = stacked_laplacian(g, m);
    let z = l.svd(true, true).solve(&rhs, 1e-12).unwrap();
    IterateState {
        x: x_star.to_vec(),
        z: z.iter().copied().collect(),
        lam: (0..n_agents).flat_map(|_| lam_star.iter().copied()).collect(),
    }
}

pub fn phi_norm(phi: &DMatrix<f64>, a: &IterateState, b: &IterateState) -> f64 {
    let d = a.stacked() - b.stacked();
    d.dot(&(phi * &d)).sqrt()
}
