//! Seeded generator for the networked electricity-market benchmark:
//! `N` generators selling into `m` capacity-limited markets.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{AgentSpec, BoxSet, CouplingConstraints, GameSpec, PriceModel};
use crate::graph::DualGraph;
use crate::solver::SamplingSchedule;

/// Closed interval used for uniform parameter draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..self.hi)
        } else {
            self.lo
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n_agents: usize,
    pub n_markets: usize,
    /// Per-component production capacity `gamma_i`.
    pub capacity: Range,
    /// Market capacity `b_j`.
    pub market_cap: Range,
    /// Quadratic cost coefficient `pi_i`.
    pub quad_coeff: Range,
    /// Linear cost coefficient components `g_i`.
    pub lin_coeff: Range,
    /// Price intercept `P_bar_j`.
    pub base_price: Range,
    pub slope_mean: f64,
    pub slope_std: f64,
    pub min_markets_per_agent: usize,
    pub max_markets_per_agent: usize,
    /// Extra edges added to the ring, zero-based node indices.
    pub chords: Vec<(usize, usize)>,
    pub alpha: f64,
    pub nu: f64,
    pub sigma: f64,
    pub deltas: Vec<f64>,
    pub seed: u64,
    pub batch: SamplingSchedule,
    pub max_iters: u64,
    /// `None` picks the mode default.
    pub tol: Option<f64>,
    /// Exact expected gradient instead of sampling.
    pub deterministic: bool,
    pub shared_batch: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_agents: 20,
            n_markets: 7,
            capacity: Range::new(1.0, 1.5),
            market_cap: Range::new(0.5, 1.0),
            quad_coeff: Range::new(1.0, 8.0),
            lin_coeff: Range::new(0.1, 0.6),
            base_price: Range::new(2.0, 4.0),
            slope_mean: 0.8,
            slope_std: 0.1,
            min_markets_per_agent: 1,
            max_markets_per_agent: 3,
            // nodes 2-15 and 6-13 when counting from one
            chords: vec![(1, 14), (5, 12)],
            alpha: 0.03,
            nu: 0.2,
            sigma: 0.03,
            deltas: vec![0.4, 0.7, 1.0],
            seed: 42,
            batch: SamplingSchedule::default(),
            max_iters: 2000,
            tol: None,
            deterministic: false,
            shared_batch: false,
        }
    }
}

impl BenchConfig {
    /// A small instance family (no chords) used by tests and quick runs.
    pub fn small(n_agents: usize, n_markets: usize, seed: u64) -> Self {
        Self {
            n_agents,
            n_markets,
            chords: Vec::new(),
            max_markets_per_agent: 3.min(n_markets),
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("capacity", self.capacity),
            ("market_cap", self.market_cap),
            ("quad_coeff", self.quad_coeff),
            ("lin_coeff", self.lin_coeff),
            ("base_price", self.base_price),
        ];
        for (name, r) in ranges {
            if !(r.lo <= r.hi) {
                return Err(Error::Config(format!("range {name} is empty")));
            }
        }
        if self.n_agents == 0 || self.n_markets == 0 {
            return Err(Error::Config("need at least one agent and one market".into()));
        }
        if self.market_cap.lo <= 0.0 || self.quad_coeff.lo <= 0.0 || self.capacity.lo < 0.0 {
            return Err(Error::Config(
                "market capacity and quadratic cost must be positive, production capacity nonnegative".into(),
            ));
        }
        if !(self.slope_mean > 0.0) || !(self.slope_std >= 0.0) {
            return Err(Error::Config(
                "slope mean must be positive and slope std nonnegative".into(),
            ));
        }
        if self.min_markets_per_agent == 0
            || self.min_markets_per_agent > self.max_markets_per_agent
            || self.max_markets_per_agent > self.n_markets
        {
            return Err(Error::Config("invalid markets-per-agent range".into()));
        }
        if self.n_markets > self.n_agents * self.max_markets_per_agent {
            return Err(Error::Config("too many markets to cover with the given agents".into()));
        }
        if let Some(&(i, j)) = self
            .chords
            .iter()
            .find(|&&(i, j)| i >= self.n_agents || j >= self.n_agents || i == j)
        {
            return Err(Error::Config(format!(
                "chord ({i}, {j}) is invalid for {} agents",
                self.n_agents
            )));
        }
        if self.deltas.iter().any(|&d| !(d > 0.0 && d <= 1.0)) {
            return Err(Error::Config("every damping value must lie in (0, 1]".into()));
        }
        self.batch.validate()
    }
}

/// Draws one benchmark instance. Every market is served by at least one agent
/// (market `j` is always offered to agent `j mod N`); the remaining
/// participation is a uniform random subset of size 1 to 3 per agent.
pub fn generate_instance<R: Rng + ?Sized>(cfg: &BenchConfig, rng: &mut R) -> Result<(GameSpec, DualGraph)> {
    cfg.validate()?;
    let (n, m) = (cfg.n_agents, cfg.n_markets);

    let mut required: Vec<Vec<usize>> = vec![Vec::new(); n];
    for j in 0..m {
        required[j % n].push(j);
    }

    let mut agents = Vec::with_capacity(n);
    for req in required.iter() {
        let count = rng
            .random_range(cfg.min_markets_per_agent..=cfg.max_markets_per_agent)
            .max(req.len());
        let mut markets = req.clone();
        let extra = count - req.len();
        if extra > 0 {
            let pool: Vec<usize> = (0..m).filter(|j| !req.contains(j)).collect();
            for idx in sample(rng, pool.len(), extra.min(pool.len())).into_iter() {
                markets.push(pool[idx]);
            }
        }
        markets.sort_unstable();
        let dim = markets.len();
        let upper: Vec<f64> = (0..dim).map(|_| cfg.capacity.draw(rng)).collect();
        let quad = cfg.quad_coeff.draw(rng);
        let lin: Vec<f64> = (0..dim).map(|_| cfg.lin_coeff.draw(rng)).collect();
        agents.push(AgentSpec {
            omega: BoxSet::new(vec![0.0; dim], upper)?,
            quad_coeff: quad,
            lin_coeff: lin,
            markets: markets.into_iter().map(Some).collect(),
        });
    }
    let cap: Vec<f64> = (0..m).map(|_| cfg.market_cap.draw(rng)).collect();
    let base: Vec<f64> = (0..m).map(|_| cfg.base_price.draw(rng)).collect();
    let std = if cfg.deterministic { 0.0 } else { cfg.slope_std };
    let spec = GameSpec::new(
        agents,
        CouplingConstraints::equal_split(cap, n),
        PriceModel {
            base_price: base,
            slope_mean: vec![cfg.slope_mean; m],
            slope_std: vec![std; m],
        },
    )?;
    let graph = DualGraph::cycle_plus_chords(n, &cfg.chords)?;
    Ok((spec, graph))
}

/// Random stream reserved for instance generation.
pub fn instance_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    crate::sampling::stream(seed, u64::MAX)
}
