//! JSON instance files, solution files and the content-addressed cache of
//! reference solutions.
//!
//! Instance layout (field names are part of the format):
//!
//! ```json
//! {
//!   "agents": [{"lower": [..], "upper": [..], "pi": 1.0, "g": [..], "markets": [0, 3]}],
//!   "cap": [..],
//!   "price": {"base": [..], "slope_mean": [..], "slope_std": [..]},
//!   "graph": [{"i": 0, "j": 1, "w": 1.0}]
//! }
//! ```
//!
//! A `null` entry in `markets` marks a decision component outside every market.
//! Capacity slices are not stored; they are always the equal split `b / N`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{solve_reference, ReferenceSolution};
use crate::error::{Error, Result};
use crate::game::{AgentSpec, BoxSet, CouplingConstraints, GameSpec, PriceModel};
use crate::graph::{DualGraph, Edge};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub pi: f64,
    pub g: Vec<f64>,
    pub markets: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceRecord {
    pub base: Vec<f64>,
    pub slope_mean: Vec<f64>,
    pub slope_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFile {
    pub agents: Vec<AgentRecord>,
    pub cap: Vec<f64>,
    pub price: PriceRecord,
    #[serde(default)]
    pub graph: Vec<Edge>,
}

impl InstanceFile {
    pub fn from_parts(spec: &GameSpec, g: &DualGraph) -> Self {
        Self {
            agents: spec
                .agents()
                .iter()
                .map(|a| AgentRecord {
                    lower: a.omega.lower.clone(),
                    upper: a.omega.upper.clone(),
                    pi: a.quad_coeff,
                    g: a.lin_coeff.clone(),
                    markets: a.markets.clone(),
                })
                .collect(),
            cap: spec.coupling().cap.clone(),
            price: PriceRecord {
                base: spec.price().base_price.clone(),
                slope_mean: spec.price().slope_mean.clone(),
                slope_std: spec.price().slope_std.clone(),
            },
            graph: g.edges(),
        }
    }

    pub fn to_parts(&self) -> Result<(GameSpec, DualGraph)> {
        let agents = self
            .agents
            .iter()
            .map(|a| {
                Ok(AgentSpec {
                    omega: BoxSet::new(a.lower.clone(), a.upper.clone())?,
                    quad_coeff: a.pi,
                    lin_coeff: a.g.clone(),
                    markets: a.markets.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = agents.len();
        let spec = GameSpec::new(
            agents,
            CouplingConstraints::equal_split(self.cap.clone(), n),
            PriceModel {
                base_price: self.price.base.clone(),
                slope_mean: self.price.slope_mean.clone(),
                slope_std: self.price.slope_std.clone(),
            },
        )?;
        let graph = DualGraph::from_edges(n, &self.graph)?;
        Ok((spec, graph))
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("instance serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// A candidate solution: primal decision and common multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    #[serde(alias = "x_star")]
    pub x: Vec<f64>,
    #[serde(alias = "lam_star", default)]
    pub lam: Vec<f64>,
}

impl SolutionFile {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedReference {
    pub instance_hash: String,
    #[serde(flatten)]
    pub solution: ReferenceSolution,
}

pub fn reference_cache_path(dir: &Path, hash: &str) -> PathBuf {
    dir.join(format!("reference-{}.json", &hash[..16.min(hash.len())]))
}

/// Returns the cached reference for this instance, solving and storing it on
/// a miss or when the cached file belongs to different content.
pub fn load_or_solve_reference(instance: &InstanceFile, spec: &GameSpec, dir: &Path) -> Result<ReferenceSolution> {
    let hash = instance.content_hash();
    let path = reference_cache_path(dir, &hash);
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(cached) = serde_json::from_str::<CachedReference>(&text) {
            if cached.instance_hash == hash {
                return Ok(cached.solution);
            }
        }
    }
    let solution = solve_reference(spec)?;
    let cached = CachedReference {
        instance_hash: hash,
        solution,
    };
    fs::create_dir_all(dir)?;
    fs::write(&path, serde_json::to_string_pretty(&cached)? + "\n")?;
    Ok(cached.solution)
}

/// Reads either an instance file or fails with a readable message.
pub fn looks_like_instance(value: &serde_json::Value) -> bool {
    value.get("agents").is_some() && value.get("cap").is_some()
}

pub fn parse_instance(value: serde_json::Value) -> Result<InstanceFile> {
    serde_json::from_value(value).map_err(|e| Error::Instance(format!("malformed instance file: {e}")))
}
