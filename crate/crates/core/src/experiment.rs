//! Damping sweep on one generated benchmark instance: one trajectory CSV and
//! one manifest per damping value.
//!
//! Output layout in the target directory:
//!
//! ```text
//! instance.json
//! reference-<hash16>.json
//! traj_delta_0.40.csv   traj_delta_0.40.json
//! ...
//! manifest.json
//! ```
//!
//! Each per-run manifest carries the full configuration, so a trajectory can
//! be regenerated from its manifest alone (see [`reproduce_csv`]).

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::ReferenceSolution;
use crate::error::{Error, Result};
use crate::game::GameSpec;
use crate::graph::DualGraph;
use crate::instance::{load_or_solve_reference, InstanceFile};
use crate::market::{generate_instance, instance_rng, BenchConfig};
use crate::operators::StepSizes;
use crate::solver::{
    BoundPolicy, GradientMode, RunReport, Solver, SolverParams, DEFAULT_TOL_EXACT, DEFAULT_TOL_SAMPLED,
};

pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub library_version: String,
    pub seed: u64,
    pub delta: f64,
    pub csv: String,
    pub instance_file: String,
    pub instance_hash: String,
    pub config: BenchConfig,
    /// Served markets per agent, as drawn by the generator.
    pub market_assignment: Vec<Vec<usize>>,
    pub alpha: f64,
    pub nu: f64,
    pub sigma: f64,
    pub eta: f64,
    pub ell: f64,
    pub beta: f64,
    pub tau: f64,
    pub tol: f64,
    pub gradient: String,
    pub bound_violations: Vec<String>,
    pub termination: String,
    pub iterations: u64,
    pub cap_bound_from: Option<u64>,
    pub final_norm_dist: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub library_version: String,
    pub seed: u64,
    pub instance_hash: String,
    pub reference_residual: crate::diagnostics::KktResidual,
    pub runs: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub instance_hash: String,
    pub reference: ReferenceSolution,
    pub runs: Vec<(RunManifest, RunReport)>,
    pub manifest_path: PathBuf,
}

impl ExperimentOutcome {
    pub fn csv_paths(&self, dir: &Path) -> Vec<PathBuf> {
        self.runs.iter().map(|(m, _)| dir.join(&m.csv)).collect()
    }

    pub fn all_converged(&self) -> bool {
        self.runs.iter().all(|(m, _)| m.termination == "converged")
    }
}

pub fn csv_name(delta: f64) -> String {
    format!("traj_delta_{delta:.2}.csv")
}

pub fn gradient_mode(cfg: &BenchConfig) -> GradientMode {
    if cfg.deterministic {
        GradientMode::Exact
    } else if cfg.shared_batch {
        GradientMode::SharedBatch
    } else {
        GradientMode::IndependentBatches
    }
}

fn mode_name(mode: GradientMode) -> &'static str {
    match mode {
        GradientMode::Exact => "exact",
        GradientMode::IndependentBatches => "independent_batches",
        GradientMode::SharedBatch => "shared_batch",
    }
}

/// Solver parameters for one damping value of the sweep: the configured
/// step sizes are used as given and any bound they exceed is recorded.
pub fn sweep_params(cfg: &BenchConfig, spec: &GameSpec, g: &DualGraph, delta: f64) -> Result<SolverParams> {
    let mode = gradient_mode(cfg);
    let mut p = SolverParams::for_instance(spec, g, mode)?;
    p.steps = StepSizes::uniform(spec.n_agents(), cfg.alpha, cfg.nu, cfg.sigma);
    p.bound_policy = BoundPolicy::Record;
    p.delta = delta;
    p.schedule = cfg.batch;
    p.max_iters = cfg.max_iters;
    p.tol = cfg.tol.unwrap_or(match mode {
        GradientMode::Exact => DEFAULT_TOL_EXACT,
        _ => DEFAULT_TOL_SAMPLED,
    });
    p.seed = cfg.seed;
    Ok(p)
}

fn market_assignment(spec: &GameSpec) -> Vec<Vec<usize>> {
    spec.agents()
        .iter()
        .map(|a| a.markets.iter().flatten().copied().collect())
        .collect()
}

fn run_one(
    cfg: &BenchConfig,
    spec: &GameSpec,
    g: &DualGraph,
    hash: &str,
    x_star: &[f64],
    delta: f64,
) -> Result<(RunManifest, RunReport)> {
    let params = sweep_params(cfg, spec, g, delta)?;
    let solver = Solver::new(spec, g, params.clone())?;
    let report = solver.run(Some(x_star))?;
    let last = report.last();
    let manifest = RunManifest {
        library_version: LIBRARY_VERSION.to_string(),
        seed: cfg.seed,
        delta,
        csv: csv_name(delta),
        instance_file: "instance.json".into(),
        instance_hash: hash.to_string(),
        config: cfg.clone(),
        market_assignment: market_assignment(spec),
        alpha: cfg.alpha,
        nu: cfg.nu,
        sigma: cfg.sigma,
        eta: params.eta,
        ell: params.ell,
        beta: params.beta,
        tau: params.tau,
        tol: params.tol,
        gradient: mode_name(params.gradient).into(),
        bound_violations: report.bound_violations.clone(),
        termination: report.termination.as_str().into(),
        iterations: last.iter,
        cap_bound_from: report.cap_bound_from,
        final_norm_dist: last.norm_dist,
    };
    Ok((manifest, report))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Generates the instance for `cfg.seed`, solves the reference once and runs
/// every damping value in `cfg.deltas` (concurrently; outputs do not depend
/// on scheduling).
pub fn run_experiment(cfg: &BenchConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    if cfg.deltas.is_empty() {
        return Err(Error::Config("no damping values given".into()));
    }
    let (spec, g) = generate_instance(cfg, &mut instance_rng(cfg.seed))?;
    let file = InstanceFile::from_parts(&spec, &g);
    let hash = file.content_hash();
    fs::create_dir_all(out_dir)?;
    file.save(&out_dir.join("instance.json"))?;
    let reference = load_or_solve_reference(&file, &spec, out_dir)?;

    let runs = cfg
        .deltas
        .par_iter()
        .map(|&d| run_one(cfg, &spec, &g, &hash, &reference.x_star, d))
        .collect::<Result<Vec<_>>>()?;

    for (manifest, report) in &runs {
        let csv_path = out_dir.join(&manifest.csv);
        report.write_csv(std::io::BufWriter::new(fs::File::create(&csv_path)?))?;
        write_json(&csv_path.with_extension("json"), manifest)?;
    }
    let top = ExperimentManifest {
        library_version: LIBRARY_VERSION.to_string(),
        seed: cfg.seed,
        instance_hash: hash.clone(),
        reference_residual: reference.residual.clone(),
        runs: runs.iter().map(|(m, _)| m.csv.clone()).collect(),
    };
    let manifest_path = out_dir.join("manifest.json");
    write_json(&manifest_path, &top)?;
    Ok(ExperimentOutcome {
        instance_hash: hash,
        reference,
        runs,
        manifest_path,
    })
}

/// One damping value on the configured instance, without writing files.
pub fn run_delta(cfg: &BenchConfig, delta: f64) -> Result<(RunManifest, RunReport)> {
    cfg.validate()?;
    let (spec, g) = generate_instance(cfg, &mut instance_rng(cfg.seed))?;
    let hash = InstanceFile::from_parts(&spec, &g).content_hash();
    let reference = crate::diagnostics::solve_reference(&spec)?;
    run_one(cfg, &spec, &g, &hash, &reference.x_star, delta)
}

/// Regenerates the trajectory CSV described by a run manifest, using only the
/// manifest's contents.
pub fn reproduce_csv(manifest: &RunManifest) -> Result<String> {
    let (replayed, report) = run_delta(&manifest.config, manifest.delta)?;
    if replayed.instance_hash != manifest.instance_hash {
        return Err(Error::Instance(format!(
            "regenerated instance hash {} differs from manifest {}",
            replayed.instance_hash, manifest.instance_hash
        )));
    }
    Ok(report.to_csv_string())
}
