//! Communication graph for the dual variables and the step-size bounds that
//! make the preconditioner diagonally dominant.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::GameSpec;

/// Weighted undirected edge, serialized as `{i, j, w}` in instance files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    #[serde(default = "unit_weight")]
    pub w: f64,
}

fn unit_weight() -> f64 {
    1.0
}

/// Weighted undirected graph over the agents, stored as a dense symmetric
/// adjacency matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DualGraph {
    weights: DMatrix<f64>,
}

impl DualGraph {
    pub fn from_edges(n_agents: usize, edges: &[Edge]) -> Result<Self> {
        let mut weights = DMatrix::zeros(n_agents, n_agents);
        for e in edges {
            if e.i >= n_agents || e.j >= n_agents {
                return Err(Error::Instance(format!(
                    "edge ({}, {}) out of range for {n_agents} agents",
                    e.i, e.j
                )));
            }
            if e.i == e.j {
                return Err(Error::Instance(format!("self loop at node {}", e.i)));
            }
            if !(e.w >= 0.0) || !e.w.is_finite() {
                return Err(Error::Instance(format!(
                    "edge ({}, {}) has invalid weight {}",
                    e.i, e.j, e.w
                )));
            }
            weights[(e.i, e.j)] += e.w;
            weights[(e.j, e.i)] += e.w;
        }
        Ok(Self { weights })
    }

    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self> {
        if !weights.is_square() {
            return Err(Error::Instance("adjacency matrix must be square".into()));
        }
        let n = weights.nrows();
        for i in 0..n {
            if weights[(i, i)] != 0.0 {
                return Err(Error::Instance(format!("nonzero diagonal at node {i}")));
            }
            for j in 0..n {
                let w = weights[(i, j)];
                if w != weights[(j, i)] || !(w >= 0.0) {
                    return Err(Error::Instance(format!(
                        "adjacency must be symmetric and nonnegative (entry {i},{j})"
                    )));
                }
            }
        }
        Ok(Self { weights })
    }

    /// Ring `0 - 1 - ... - (n-1) - 0` with unit weights plus the given chords.
    pub fn cycle_plus_chords(n_agents: usize, chords: &[(usize, usize)]) -> Result<Self> {
        let mut edges = Vec::new();
        if n_agents == 2 {
            edges.push(Edge { i: 0, j: 1, w: 1.0 });
        } else if n_agents > 2 {
            edges.extend((0..n_agents).map(|i| Edge {
                i,
                j: (i + 1) % n_agents,
                w: 1.0,
            }));
        }
        edges.extend(chords.iter().map(|&(i, j)| Edge { i, j, w: 1.0 }));
        Self::from_edges(n_agents, &edges)
    }

    pub fn n_agents(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }

    /// Edge list with `i < j` and positive weight.
    pub fn edges(&self) -> Vec<Edge> {
        let n = self.n_agents();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let w = self.weights[(i, j)];
                if w > 0.0 {
                    out.push(Edge { i, j, w });
                }
            }
        }
        out
    }

    /// Positive-weight neighbours of every node, in index order.
    pub fn neighbours(&self) -> Vec<Vec<(usize, f64)>> {
        let n = self.n_agents();
        (0..n)
            .map(|i| {
                (0..n)
                    .filter_map(|j| {
                        let w = self.weights[(i, j)];
                        (w > 0.0).then_some((j, w))
                    })
                    .collect()
            })
            .collect()
    }
}

/// `L = diag(W 1) - W`.
pub fn laplacian(g: &DualGraph) -> DMatrix<f64> {
    let (deg, _) = degrees(g);
    let mut l = -g.weights.clone();
    for (i, d) in deg.into_iter().enumerate() {
        l[(i, i)] = d;
    }
    l
}

/// Weighted degrees `d_i` and their maximum `d*`.
pub fn degrees(g: &DualGraph) -> (Vec<f64>, f64) {
    let deg: Vec<f64> = g.weights.row_iter().map(|r| r.sum()).collect();
    let max = deg.iter().copied().fold(0.0, f64::max);
    (deg, max)
}

/// Breadth-first reachability over positive-weight edges.
pub fn is_connected(g: &DualGraph) -> bool {
    let n = g.n_agents();
    if n == 0 {
        return false;
    }
    let nbrs = g.neighbours();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for &(v, _) in &nbrs[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Largest admissible step sizes per agent together with the cocoercivity
/// constant `beta` and margin `tau` they were derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSizeBounds {
    pub alpha_max: Vec<f64>,
    pub nu_max: Vec<f64>,
    pub sigma_max: Vec<f64>,
    pub tau: f64,
    pub beta: f64,
}

/// Fraction of `1 / (2 beta)` used for `tau`.
pub const TAU_FRACTION: f64 = 0.9;

/// Max over columns of `A_i` of the column's absolute sum (row sums of `A_i'`).
pub(crate) fn agent_column_norm(spec: &GameSpec, i: usize) -> f64 {
    spec.agent(i)
        .markets
        .iter()
        .map(|c| if c.is_some() { 1.0 } else { 0.0 })
        .fold(0.0, f64::max)
}

/// Max over markets of the number of agent-`i` columns feeding it (row sums of `A_i`).
pub(crate) fn agent_row_norm(spec: &GameSpec, i: usize) -> f64 {
    let mut counts = vec![0.0; spec.m()];
    for j in spec.agent(i).markets.iter().flatten() {
        counts[*j] += 1.0;
    }
    counts.into_iter().fold(0.0, f64::max)
}

/// Step-size bounds making every row of the preconditioner diagonally dominant
/// with margin `tau`:
///
/// ```text
/// beta     = min{ 1/(2 d*), eta / ell^2 }      (1/(2 d*) dropped when d* = 0)
/// tau      = 0.9 / (2 beta)
/// alpha_i <= 1 / (max col-sum |A_i| + tau)
/// nu_i    <= 1 / (2 d_i + tau)
/// sigma_i <= 1 / (max row-sum |A_i| + 2 d_i + tau)
/// ```
pub fn step_size_bounds(g: &DualGraph, spec: &GameSpec, eta: f64, ell: f64) -> Result<StepSizeBounds> {
    if !(eta > 0.0) {
        return Err(Error::Config(format!(
            "strong monotonicity constant {eta} must be positive"
        )));
    }
    if !(ell >= eta) {
        return Err(Error::Config(format!(
            "Lipschitz constant {ell} must be at least the monotonicity constant {eta}"
        )));
    }
    if g.n_agents() != spec.n_agents() {
        return Err(Error::Dimension {
            context: "graph size",
            expected: spec.n_agents(),
            got: g.n_agents(),
        });
    }
    if !is_connected(g) {
        return Err(Error::Disconnected);
    }
    let (deg, dmax) = degrees(g);
    let mono = eta / (ell * ell);
    let beta = if dmax > 0.0 { mono.min(1.0 / (2.0 * dmax)) } else { mono };
    let tau = TAU_FRACTION / (2.0 * beta);
    let n = spec.n_agents();
    let mut alpha_max = Vec::with_capacity(n);
    let mut nu_max = Vec::with_capacity(n);
    let mut sigma_max = Vec::with_capacity(n);
    for (i, &d) in deg.iter().enumerate().take(n) {
        alpha_max.push(1.0 / (agent_column_norm(spec, i) + tau));
        nu_max.push(1.0 / (2.0 * d + tau));
        sigma_max.push(1.0 / (agent_row_norm(spec, i) + 2.0 * d + tau));
    }
    Ok(StepSizeBounds {
        alpha_max,
        nu_max,
        sigma_max,
        tau,
        beta,
    })
}
