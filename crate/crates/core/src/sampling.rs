//! Seeded random streams and slope sampling.
//!
//! Every consumer of randomness owns a ChaCha stream derived from the run
//! seed: stream 0 initializes the primal iterate, stream `i + 1` feeds agent
//! `i`'s batches, and stream `N + 1` feeds the shared batch when all agents
//! use common samples. Per-agent streams make the phase-parallel sampling
//! schedule produce exactly the same numbers as the sequential one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::game::{GameSpec, PriceModel};

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn init_stream(seed: u64) -> ChaCha8Rng {
    stream(seed, 0)
}

pub fn agent_streams(seed: u64, n_agents: usize) -> Vec<ChaCha8Rng> {
    (0..n_agents).map(|i| stream(seed, i as u64 + 1)).collect()
}

pub fn shared_stream(seed: u64, n_agents: usize) -> ChaCha8Rng {
    stream(seed, n_agents as u64 + 1)
}

/// Normal(mean, std^2) conditioned on being nonnegative (rejection sampling).
#[derive(Debug, Clone, Copy)]
pub struct TruncatedSlope {
    mean: f64,
    normal: Option<Normal<f64>>,
}

impl TruncatedSlope {
    pub fn new(mean: f64, std: f64) -> Self {
        let normal = (std > 0.0).then(|| Normal::new(mean, std).expect("finite std"));
        Self { mean, normal }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.normal {
            None => self.mean.max(0.0),
            Some(n) => loop {
                let v = n.sample(rng);
                if v >= 0.0 {
                    break v;
                }
            },
        }
    }
}

pub fn slope_distributions(price: &PriceModel) -> Vec<TruncatedSlope> {
    price
        .slope_mean
        .iter()
        .zip(&price.slope_std)
        .map(|(&mu, &s)| TruncatedSlope::new(mu, s))
        .collect()
}

/// Draws one full slope realization (all `m` markets).
pub fn draw_slopes<R: Rng + ?Sized>(dists: &[TruncatedSlope], rng: &mut R) -> Vec<f64> {
    dists.iter().map(|d| d.sample(rng)).collect()
}

/// Mean of `batch` slope draws restricted to the markets agent `i` serves.
/// Entries of unserved markets are left at the slope mean; the agent's
/// gradient does not read them.
pub fn agent_mean_slopes<R: Rng + ?Sized>(
    spec: &GameSpec,
    dists: &[TruncatedSlope],
    i: usize,
    batch: u64,
    rng: &mut R,
) -> Vec<f64> {
    let mut served: Vec<usize> = spec.agent(i).markets.iter().flatten().copied().collect();
    served.sort_unstable();
    served.dedup();
    let mut out = spec.price().slope_mean.clone();
    let mut acc = vec![0.0; served.len()];
    for _ in 0..batch {
        for (a, &j) in acc.iter_mut().zip(&served) {
            *a += dists[j].sample(rng);
        }
    }
    let inv = 1.0 / batch as f64;
    for (a, &j) in acc.into_iter().zip(&served) {
        out[j] = a * inv;
    }
    out
}

/// Mean of `batch` full slope draws.
pub fn shared_mean_slopes<R: Rng + ?Sized>(dists: &[TruncatedSlope], batch: u64, rng: &mut R) -> Vec<f64> {
    let mut acc = vec![0.0; dists.len()];
    for _ in 0..batch {
        for (a, d) in acc.iter_mut().zip(dists) {
            *a += d.sample(rng);
        }
    }
    let inv = 1.0 / batch as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}
