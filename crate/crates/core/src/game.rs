//! Game instance: box-constrained agents with quadratic production costs,
//! a linear stochastic inverse-demand price per market, and affine shared
//! market-capacity constraints `A x <= b`.
//!
//! Agent `i` owns the block `x_i` of the stacked decision vector. Each column
//! of its market map `A_i` is a 0/1 selector: column `k` either delivers into
//! exactly one market or (for decoupled test games) into none.
//!
//! The cost of agent `i` under a slope realization `d` (the diagonal of
//! `D(xi)`) is
//!
//! ```text
//! J_i(x, d) = pi_i |x_i|^2 + g_i' x_i - (P_bar - diag(d) A x)' A_i x_i
//! ```
//!
//! and its partial gradient is
//!
//! ```text
//! grad_i J_i(x, d) = 2 pi_i x_i + g_i - A_i'(P_bar - diag(d) A x) + A_i' diag(d) A_i x_i
//! ```
//!
//! The gradient is affine in `d`, so the expectation is obtained by plugging
//! in the slope mean and a sample average by plugging in the sample mean.

use std::fmt;
use std::ops::Range;

use crate::error::{check_len, Error, Result};

/// Local decision set `Omega_i = [lower, upper]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_len("box bounds", lower.len(), upper.len())?;
        if let Some(k) = (0..lower.len()).find(|&k| !(lower[k] <= upper[k])) {
            return Err(Error::Instance(format!(
                "box component {k}: lower {} exceeds upper {}",
                lower[k], upper[k]
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Clamp `v` into the box in place. Caller guarantees matching length.
    pub fn project_in_place(&self, v: &mut [f64]) {
        for ((vk, &lo), &hi) in v.iter_mut().zip(&self.lower).zip(&self.upper) {
            *vk = vk.clamp(lo, hi);
        }
    }

    pub fn contains(&self, v: &[f64], tol: f64) -> bool {
        v.len() == self.dim()
            && v.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&x, (&lo, &hi))| x >= lo - tol && x <= hi + tol)
    }
}

/// Euclidean projection onto a box (componentwise clamp).
pub fn project_local(omega: &BoxSet, v: &[f64]) -> Result<Vec<f64>> {
    check_len("project_local", omega.dim(), v.len())?;
    let mut out = v.to_vec();
    omega.project_in_place(&mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub omega: BoxSet,
    /// `pi_i`, must be positive.
    pub quad_coeff: f64,
    /// `g_i`, one entry per decision component.
    pub lin_coeff: Vec<f64>,
    /// Market served by each decision component. `None` marks a column of
    /// `A_i` that is identically zero.
    pub markets: Vec<Option<usize>>,
}

impl AgentSpec {
    pub fn dim(&self) -> usize {
        self.omega.dim()
    }
}

/// Shared capacity `b` and the per-agent slices `b_i` used by the dual updates.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingConstraints {
    pub cap: Vec<f64>,
    pub slices: Vec<Vec<f64>>,
}

impl CouplingConstraints {
    /// `b_i = b / N` for every agent.
    pub fn equal_split(cap: Vec<f64>, n_agents: usize) -> Self {
        let share = 1.0 / n_agents.max(1) as f64;
        let slice: Vec<f64> = cap.iter().map(|b| b * share).collect();
        Self {
            slices: vec![slice; n_agents],
            cap,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriceModel {
    pub base_price: Vec<f64>,
    pub slope_mean: Vec<f64>,
    pub slope_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec {
    agents: Vec<AgentSpec>,
    coupling: CouplingConstraints,
    price: PriceModel,
    offsets: Vec<usize>,
    m: usize,
}

/// One broken invariant reported by [`GameSpec::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    AgentBox { agent: usize, component: usize },
    AgentQuadCoeff { agent: usize, value: f64 },
    AgentLinCoeff { agent: usize, expected: usize, got: usize },
    AgentMarketMap { agent: usize, column: usize },
    AgentMarketColumns { agent: usize, expected: usize, got: usize },
    CouplingSlices(String),
    CouplingCap { market: usize, value: f64 },
    PriceDims(String),
    SlopeMean { market: usize, value: f64 },
    SlopeStd { market: usize, value: f64 },
    ZeroInfeasible(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::AgentBox { agent, component } => {
                write!(f, "agent {agent}: box component {component} has lower > upper")
            }
            Violation::AgentQuadCoeff { agent, value } => {
                write!(f, "agent {agent}: quadratic coefficient {value} is not positive")
            }
            Violation::AgentLinCoeff { agent, expected, got } => write!(
                f,
                "agent {agent}: linear coefficient has {got} entries, expected {expected}"
            ),
            Violation::AgentMarketMap { agent, column } => {
                write!(f, "agent {agent}: column {column} selects a nonexistent market")
            }
            Violation::AgentMarketColumns { agent, expected, got } => {
                write!(f, "agent {agent}: market map has {got} columns, expected {expected}")
            }
            Violation::CouplingSlices(msg) => write!(f, "coupling: {msg}"),
            Violation::CouplingCap { market, value } => {
                write!(f, "coupling: capacity of market {market} is {value}, must be positive")
            }
            Violation::PriceDims(msg) => write!(f, "price: {msg}"),
            Violation::SlopeMean { market, value } => {
                write!(f, "price: slope mean of market {market} is {value}, must be positive")
            }
            Violation::SlopeStd { market, value } => {
                write!(f, "price: slope std of market {market} is {value}, must be nonnegative")
            }
            Violation::ZeroInfeasible(msg) => write!(f, "feasibility: {msg}"),
        }
    }
}

impl GameSpec {
    /// Builds an instance, checking only the shape consistency needed to index
    /// into it safely. Semantic invariants are reported by [`Self::validate`].
    pub fn new(agents: Vec<AgentSpec>, coupling: CouplingConstraints, price: PriceModel) -> Result<Self> {
        let m = coupling.cap.len();
        if agents.is_empty() {
            return Err(Error::Instance("game has no agents".into()));
        }
        for (i, a) in agents.iter().enumerate() {
            if a.markets.len() != a.dim() || a.lin_coeff.len() != a.dim() {
                return Err(Error::Instance(format!(
                    "agent {i}: bounds, linear coefficient and market map lengths disagree"
                )));
            }
            if a.markets.iter().flatten().any(|&j| j >= m) {
                return Err(Error::Instance(format!(
                    "agent {i}: market index out of range (m = {m})"
                )));
            }
        }
        check_len("coupling slices", agents.len(), coupling.slices.len())?;
        for s in &coupling.slices {
            check_len("coupling slice", m, s.len())?;
        }
        check_len("base price", m, price.base_price.len())?;
        check_len("slope mean", m, price.slope_mean.len())?;
        check_len("slope std", m, price.slope_std.len())?;

        let mut offsets = Vec::with_capacity(agents.len() + 1);
        offsets.push(0);
        for a in &agents {
            offsets.push(offsets.last().unwrap() + a.dim());
        }
        Ok(Self {
            agents,
            coupling,
            price,
            offsets,
            m,
        })
    }

    pub fn agents(&self) -> &[AgentSpec] {
        &self.agents
    }

    pub fn agent(&self, i: usize) -> &AgentSpec {
        &self.agents[i]
    }

    pub fn coupling(&self) -> &CouplingConstraints {
        &self.coupling
    }

    pub fn price(&self) -> &PriceModel {
        &self.price
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// Total number of decision components.
    pub fn n(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Number of markets (rows of `A`).
    pub fn m(&self) -> usize {
        self.m
    }

    /// Index range of agent `i` inside the stacked decision vector.
    pub fn block(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// `A_i x_i`, accumulated into `out` (length `m`).
    pub fn add_agent_supply(&self, i: usize, xi: &[f64], out: &mut [f64]) {
        for (&col, &v) in self.agents[i].markets.iter().zip(xi) {
            if let Some(j) = col {
                out[j] += v;
            }
        }
    }

    pub fn agent_supply(&self, i: usize, xi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        self.add_agent_supply(i, xi, &mut out);
        out
    }

    /// `A x` for the stacked decision `x`.
    pub fn total_supply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for i in 0..self.n_agents() {
            self.add_agent_supply(i, &x[self.block(i)], &mut out);
        }
        out
    }

    /// `A_i' y` for `y` of length `m`, written into `out` (length `n_i`).
    pub fn agent_transpose_into(&self, i: usize, y: &[f64], out: &mut [f64]) {
        for (o, &col) in out.iter_mut().zip(&self.agents[i].markets) {
            *o = col.map_or(0.0, |j| y[j]);
        }
    }

    fn check_stacked(&self, context: &'static str, x: &[f64]) -> Result<()> {
        check_len(context, self.n(), x.len())
    }

    fn check_agent(&self, i: usize) -> Result<()> {
        if i < self.n_agents() {
            Ok(())
        } else {
            Err(Error::Instance(format!(
                "agent index {i} out of range ({} agents)",
                self.n_agents()
            )))
        }
    }

    /// Realized cost `J_i(x, d)` for a slope realization `d`.
    pub fn eval_cost(&self, i: usize, x: &[f64], slope: &[f64]) -> Result<f64> {
        self.check_agent(i)?;
        self.check_stacked("eval_cost decision", x)?;
        check_len("eval_cost slope", self.m, slope.len())?;
        let agent = &self.agents[i];
        let xi = &x[self.block(i)];
        let production: f64 = xi
            .iter()
            .zip(&agent.lin_coeff)
            .map(|(&v, &g)| agent.quad_coeff * v * v + g * v)
            .sum();
        let supply = self.total_supply(x);
        let own = self.agent_supply(i, xi);
        let revenue: f64 = (0..self.m)
            .map(|j| (self.price.base_price[j] - slope[j] * supply[j]) * own[j])
            .sum();
        Ok(production - revenue)
    }

    /// Gradient of `J_i` for a fixed slope vector, given the precomputed
    /// total supply `A x`. Writes `n_i` entries into `out`.
    pub(crate) fn gradient_with_slope_into(&self, i: usize, x: &[f64], supply: &[f64], slope: &[f64], out: &mut [f64]) {
        let agent = &self.agents[i];
        let xi = &x[self.block(i)];
        let own = self.agent_supply(i, xi);
        for (k, o) in out.iter_mut().enumerate() {
            let mut v = 2.0 * agent.quad_coeff * xi[k] + agent.lin_coeff[k];
            if let Some(j) = agent.markets[k] {
                v += -(self.price.base_price[j] - slope[j] * supply[j]) + slope[j] * own[j];
            }
            *o = v;
        }
    }

    /// Expected partial gradient `E[grad_i J_i(x, xi)]`, evaluated in closed
    /// form at the slope mean.
    pub fn local_gradient_exact(&self, i: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.check_agent(i)?;
        self.check_stacked("local_gradient_exact", x)?;
        let supply = self.total_supply(x);
        let mut out = vec![0.0; self.agents[i].dim()];
        self.gradient_with_slope_into(i, x, &supply, &self.price.slope_mean, &mut out);
        Ok(out)
    }

    /// Sample-average estimate of the partial gradient over the given slope
    /// realizations.
    pub fn local_gradient_sampled(&self, i: usize, x: &[f64], samples: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_agent(i)?;
        self.check_stacked("local_gradient_sampled", x)?;
        if samples.is_empty() {
            return Err(Error::EmptySamples);
        }
        let mut mean = vec![0.0; self.m];
        for s in samples {
            check_len("slope sample", self.m, s.len())?;
            for (acc, &v) in mean.iter_mut().zip(s) {
                *acc += v;
            }
        }
        let inv = 1.0 / samples.len() as f64;
        mean.iter_mut().for_each(|v| *v *= inv);
        let supply = self.total_supply(x);
        let mut out = vec![0.0; self.agents[i].dim()];
        self.gradient_with_slope_into(i, x, &supply, &mean, &mut out);
        Ok(out)
    }

    /// Decision at the lower corner of every box.
    pub fn lower_corner(&self) -> Vec<f64> {
        self.agents.iter().flat_map(|a| a.omega.lower.iter().copied()).collect()
    }

    pub fn contains_local(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.n() && (0..self.n_agents()).all(|i| self.agents[i].omega.contains(&x[self.block(i)], tol))
    }

    /// Checks every instance invariant; an empty list means the instance is
    /// well formed and `x = 0` is feasible.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let m = self.m;
        for (i, a) in self.agents.iter().enumerate() {
            for k in 0..a.dim() {
                if !(a.omega.lower[k] <= a.omega.upper[k]) {
                    out.push(Violation::AgentBox { agent: i, component: k });
                }
            }
            if !(a.quad_coeff > 0.0) {
                out.push(Violation::AgentQuadCoeff {
                    agent: i,
                    value: a.quad_coeff,
                });
            }
            if a.lin_coeff.len() != a.dim() {
                out.push(Violation::AgentLinCoeff {
                    agent: i,
                    expected: a.dim(),
                    got: a.lin_coeff.len(),
                });
            }
            if a.markets.len() != a.dim() {
                out.push(Violation::AgentMarketColumns {
                    agent: i,
                    expected: a.dim(),
                    got: a.markets.len(),
                });
            }
            for (k, col) in a.markets.iter().enumerate() {
                if matches!(col, Some(j) if *j >= m) {
                    out.push(Violation::AgentMarketMap { agent: i, column: k });
                }
            }
        }

        let c = &self.coupling;
        if c.slices.len() != self.n_agents() {
            out.push(Violation::CouplingSlices(format!(
                "{} slices for {} agents",
                c.slices.len(),
                self.n_agents()
            )));
        } else {
            for j in 0..m {
                let total: f64 = c.slices.iter().map(|s| s.get(j).copied().unwrap_or(0.0)).sum();
                let scale = c.cap[j].abs().max(1.0);
                if (total - c.cap[j]).abs() > 1e-12 * scale * self.n_agents() as f64 {
                    out.push(Violation::CouplingSlices(format!(
                        "slices of market {j} sum to {total}, capacity is {}",
                        c.cap[j]
                    )));
                }
            }
        }
        for (j, &b) in c.cap.iter().enumerate() {
            if !(b > 0.0) {
                out.push(Violation::CouplingCap { market: j, value: b });
            }
        }

        let p = &self.price;
        if p.base_price.len() != m || p.slope_mean.len() != m || p.slope_std.len() != m {
            out.push(Violation::PriceDims(format!("price vectors must have length {m}")));
        } else {
            for j in 0..m {
                if !(p.slope_mean[j] > 0.0) {
                    out.push(Violation::SlopeMean {
                        market: j,
                        value: p.slope_mean[j],
                    });
                }
                if !(p.slope_std[j] >= 0.0) {
                    out.push(Violation::SlopeStd {
                        market: j,
                        value: p.slope_std[j],
                    });
                }
            }
        }

        // x = 0 must lie in every box and satisfy A*0 <= b.
        for (i, a) in self.agents.iter().enumerate() {
            if !a.omega.contains(&vec![0.0; a.dim()], 0.0) {
                out.push(Violation::ZeroInfeasible(format!(
                    "agent {i}: zero decision lies outside its box"
                )));
            }
        }
        if c.cap.iter().any(|&b| b < 0.0) {
            out.push(Violation::ZeroInfeasible(
                "zero decision violates a capacity constraint".into(),
            ));
        }
        out
    }
}
