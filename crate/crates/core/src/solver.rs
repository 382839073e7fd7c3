//! Damped stochastic forward-backward iteration with a growing
//! sample-average batch.
//!
//! Each iteration draws `N_k` slope realizations per agent, forms the
//! sample-average pseudo-gradient, takes the exact preconditioned backward
//! step and then averages with the previous iterate:
//! `omega_{k+1} = (1 - delta) omega_k + delta omega~_k`.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::game::GameSpec;
use crate::graph::{is_connected, step_size_bounds, DualGraph, StepSizeBounds};
use crate::operators::{
    backward_step_with, monotonicity_constants, pseudo_gradient, pseudo_gradient_affine, Execution, IterateState,
    Network, StepSizes,
};
use crate::sampling::{
    agent_mean_slopes, agent_streams, init_stream, shared_mean_slopes, shared_stream, slope_distributions,
    TruncatedSlope,
};

/// Batch growth `N_k >= c (k + k0)^(a + 1)`, optionally capped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingSchedule {
    pub c: f64,
    pub k0: f64,
    pub a: f64,
    pub cap: Option<u64>,
}

impl Default for SamplingSchedule {
    fn default() -> Self {
        Self {
            c: 1.0,
            k0: 5.0,
            a: 0.5,
            cap: Some(5000),
        }
    }
}

impl SamplingSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.k0 > 0.0 && self.a > 0.0) {
            return Err(Error::Config(format!(
                "batch schedule needs c, k0, a > 0 (got {}, {}, {})",
                self.c, self.k0, self.a
            )));
        }
        if self.cap == Some(0) {
            return Err(Error::Config("batch cap must be positive".into()));
        }
        Ok(())
    }

    fn uncapped(&self, k: u64) -> u64 {
        let raw = (self.c * (k as f64 + self.k0).powf(self.a + 1.0)).ceil();
        (raw as u64).max(1)
    }

    pub fn batch_size(&self, k: u64) -> u64 {
        let n = self.uncapped(k);
        self.cap.map_or(n, |cap| n.min(cap))
    }

    /// Whether the cap truncates the growth bound at iteration `k`.
    pub fn cap_binds(&self, k: u64) -> bool {
        self.cap.is_some_and(|cap| self.uncapped(k) > cap)
    }
}

/// How sampled gradients are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientMode {
    /// Closed-form expected gradient; no sampling.
    Exact,
    /// Every agent averages its own i.i.d. batch.
    #[default]
    IndependentBatches,
    /// All agents average one common batch per iteration.
    SharedBatch,
}

/// What to do when the step sizes exceed the diagonal-dominance bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundPolicy {
    #[default]
    Enforce,
    /// Run anyway and list the violations in the report.
    Record,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverParams {
    pub steps: StepSizes,
    pub delta: f64,
    pub eta: f64,
    pub ell: f64,
    pub beta: f64,
    pub tau: f64,
    pub schedule: SamplingSchedule,
    pub max_iters: u64,
    pub tol: f64,
    pub seed: u64,
    pub gradient: GradientMode,
    pub execution: Execution,
    pub bound_policy: BoundPolicy,
}

pub const DEFAULT_TOL_EXACT: f64 = 1e-6;
pub const DEFAULT_TOL_SAMPLED: f64 = 1e-3;

impl SolverParams {
    /// Parameters with `eta`, `ell` computed from the instance's affine
    /// pseudo-gradient and `beta`, `tau` from the step-size bounds. Step sizes
    /// default to the bound maxima.
    pub fn for_instance(spec: &GameSpec, g: &DualGraph, gradient: GradientMode) -> Result<Self> {
        let (eta, ell) = monotonicity_constants(&pseudo_gradient_affine(spec));
        let bounds = step_size_bounds(g, spec, eta, ell)?;
        Ok(Self {
            steps: StepSizes::from_bounds(&bounds),
            delta: 1.0,
            eta,
            ell,
            beta: bounds.beta,
            tau: bounds.tau,
            schedule: SamplingSchedule::default(),
            max_iters: 10_000,
            tol: if gradient == GradientMode::Exact {
                DEFAULT_TOL_EXACT
            } else {
                DEFAULT_TOL_SAMPLED
            },
            seed: 0,
            gradient,
            execution: Execution::Sequential,
            bound_policy: BoundPolicy::Enforce,
        })
    }
}

/// Snapshot of one iterate `omega_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iter: u64,
    /// Samples per agent used to move from `omega_k`; 0 in exact mode and for
    /// the terminal record.
    pub batch: u64,
    /// `|omega_k - omega~_k| / max(1, |omega_k|)` with the exact gradient.
    pub nat_residual: f64,
    /// Largest dual disagreement over graph edges.
    pub consensus: f64,
    /// `max(0, max_j (A x - b)_j)`.
    pub constraint_violation: f64,
    /// `|x_k - x*| / |x*|` when a reference is supplied.
    pub norm_dist: Option<f64>,
    /// `|F_hat(x_k) - F(x_k)|^2` for the sampled gradient used at this step.
    pub sample_error_sq: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIters,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxIters => "max_iters",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub records: Vec<IterRecord>,
    pub terminal: IterateState,
    pub termination: Termination,
    /// First iteration at which the batch cap truncated the growth schedule.
    pub cap_bound_from: Option<u64>,
    pub bound_violations: Vec<String>,
}

pub const CSV_HEADER: &str = "iter,batch,nat_residual,consensus,constraint_violation,norm_dist";

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl RunReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.iter,
                r.batch,
                fmt_f64(r.nat_residual),
                fmt_f64(r.consensus),
                fmt_f64(r.constraint_violation),
                fmt_f64(r.norm_dist.unwrap_or(f64::NAN)),
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii")
    }

    pub fn last(&self) -> &IterRecord {
        self.records.last().expect("a run has at least one record")
    }

    pub fn norm_dist_series(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.norm_dist).collect()
    }
}

/// Per-run randomness: one stream for initialization, one per agent, one
/// shared stream.
pub struct RunStreams {
    pub init: ChaCha8Rng,
    pub agents: Vec<ChaCha8Rng>,
    pub shared: ChaCha8Rng,
}

impl RunStreams {
    pub fn new(seed: u64, n_agents: usize) -> Self {
        Self {
            init: init_stream(seed),
            agents: agent_streams(seed, n_agents),
            shared: shared_stream(seed, n_agents),
        }
    }
}

/// A validated instance bound to solver parameters.
pub struct Solver<'a> {
    spec: &'a GameSpec,
    net: Network,
    params: SolverParams,
    bounds: StepSizeBounds,
    slopes: Vec<TruncatedSlope>,
    violations: Vec<String>,
}

pub fn check_steps_against(bounds: &StepSizeBounds, steps: &StepSizes) -> Vec<String> {
    let mut out = Vec::new();
    for i in 0..steps.alpha.len() {
        for (name, v, max) in [
            ("alpha", steps.alpha[i], bounds.alpha_max[i]),
            ("nu", steps.nu[i], bounds.nu_max[i]),
            ("sigma", steps.sigma[i], bounds.sigma_max[i]),
        ] {
            if v > max * (1.0 + 1e-12) {
                out.push(format!("agent {i}: {name} = {v} exceeds bound {max}"));
            }
        }
    }
    out
}

impl<'a> Solver<'a> {
    pub fn new(spec: &'a GameSpec, g: &DualGraph, params: SolverParams) -> Result<Self> {
        let violations = spec.validate();
        if !violations.is_empty() {
            let msgs: Vec<String> = violations.iter().map(ToString::to_string).collect();
            return Err(Error::Instance(msgs.join("; ")));
        }
        if !is_connected(g) {
            return Err(Error::Disconnected);
        }
        params.steps.validate(spec.n_agents())?;
        params.schedule.validate()?;
        if !(params.delta > 0.0 && params.delta <= 1.0) {
            return Err(Error::Config(format!("damping {} must lie in (0, 1]", params.delta)));
        }
        if !(params.tol >= 0.0) {
            return Err(Error::Config("tolerance must be nonnegative".into()));
        }
        let bounds = step_size_bounds(g, spec, params.eta, params.ell)?;
        let violations = check_steps_against(&bounds, &params.steps);
        if !violations.is_empty() && params.bound_policy == BoundPolicy::Enforce {
            return Err(Error::Config(violations.join("; ")));
        }
        Ok(Self {
            spec,
            net: Network::new(spec, g)?,
            slopes: slope_distributions(spec.price()),
            params,
            bounds,
            violations,
        })
    }

    pub fn params(&self) -> &SolverParams {
        &self.params
    }

    pub fn bounds(&self) -> &StepSizeBounds {
        &self.bounds
    }

    pub fn bound_violations(&self) -> &[String] {
        &self.violations
    }

    /// `x_0` uniform in the boxes, `z_0 = 0`, `lambda_0 = 0`.
    pub fn initial_state(&self, rng: &mut ChaCha8Rng) -> IterateState {
        let mut s = IterateState::zeros(self.spec);
        let mut k = 0;
        for a in self.spec.agents() {
            for (lo, hi) in a.omega.lower.iter().zip(&a.omega.upper) {
                s.x[k] = if hi > lo { rng.random_range(*lo..*hi) } else { *lo };
                k += 1;
            }
        }
        s
    }

    fn sampled_gradient(&self, x: &[f64], batch: u64, streams: &mut RunStreams) -> Vec<f64> {
        let spec = self.spec;
        let supply = spec.total_supply(x);
        let mut out = vec![0.0; spec.n()];
        match self.params.gradient {
            GradientMode::Exact => unreachable!("exact mode does not sample"),
            GradientMode::SharedBatch => {
                let slope = shared_mean_slopes(&self.slopes, batch, &mut streams.shared);
                for i in 0..spec.n_agents() {
                    spec.gradient_with_slope_into(i, x, &supply, &slope, &mut out[spec.block(i)]);
                }
            }
            GradientMode::IndependentBatches => {
                let slopes: Vec<Vec<f64>> = match self.params.execution {
                    Execution::Sequential => streams
                        .agents
                        .iter_mut()
                        .enumerate()
                        .map(|(i, rng)| agent_mean_slopes(spec, &self.slopes, i, batch, rng))
                        .collect(),
                    Execution::PhaseParallel => streams
                        .agents
                        .par_iter_mut()
                        .enumerate()
                        .map(|(i, rng)| agent_mean_slopes(spec, &self.slopes, i, batch, rng))
                        .collect(),
                };
                for (i, slope) in slopes.iter().enumerate() {
                    spec.gradient_with_slope_into(i, x, &supply, slope, &mut out[spec.block(i)]);
                }
            }
        }
        out
    }

    fn record_for(
        &self,
        k: u64,
        s: &IterateState,
        tilde_exact: &IterateState,
        x_ref: Option<(&[f64], f64)>,
    ) -> IterRecord {
        let supply = self.spec.total_supply(&s.x);
        let violation = supply
            .iter()
            .zip(&self.spec.coupling().cap)
            .map(|(ax, b)| ax - b)
            .fold(0.0, f64::max);
        let norm_dist =
            x_ref.map(|(xs, norm)| s.x.iter().zip(xs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / norm);
        IterRecord {
            iter: k,
            batch: 0,
            nat_residual: s.distance(tilde_exact) / s.norm().max(1.0),
            consensus: self.net.consensus_gap(&s.lam),
            constraint_violation: violation,
            norm_dist,
            sample_error_sq: None,
        }
    }

    fn exact_tilde(&self, s: &IterateState) -> (Vec<f64>, IterateState) {
        let f = pseudo_gradient(self.spec, &s.x).expect("validated dims");
        let tilde = backward_step_with(self.spec, &self.net, &self.params.steps, s, &f, self.params.execution);
        (f, tilde)
    }

    /// One damped forward-backward step from `omega_k`. The returned record
    /// describes `omega_k` itself.
    pub fn iterate_once(&self, s: &IterateState, k: u64, streams: &mut RunStreams) -> (IterateState, IterRecord) {
        self.iterate_once_with_ref(s, k, streams, None)
    }

    fn iterate_once_with_ref(
        &self,
        s: &IterateState,
        k: u64,
        streams: &mut RunStreams,
        x_ref: Option<(&[f64], f64)>,
    ) -> (IterateState, IterRecord) {
        let (f_exact, tilde_exact) = self.exact_tilde(s);
        let mut record = self.record_for(k, s, &tilde_exact, x_ref);
        let tilde = match self.params.gradient {
            GradientMode::Exact => tilde_exact,
            _ => {
                let batch = self.params.schedule.batch_size(k);
                let fhat = self.sampled_gradient(&s.x, batch, streams);
                record.batch = batch;
                record.sample_error_sq = Some(fhat.iter().zip(&f_exact).map(|(a, b)| (a - b) * (a - b)).sum());
                backward_step_with(
                    self.spec,
                    &self.net,
                    &self.params.steps,
                    s,
                    &fhat,
                    self.params.execution,
                )
            }
        };
        (s.damped_toward(&tilde, self.params.delta), record)
    }

    /// Iterates from the standard initialization until the natural residual
    /// drops to `tol` or `max_iters` steps were taken.
    pub fn run(&self, x_ref: Option<&[f64]>) -> Result<RunReport> {
        let mut streams = RunStreams::new(self.params.seed, self.spec.n_agents());
        let init = self.initial_state(&mut streams.init);
        self.run_from(init, &mut streams, x_ref)
    }

    pub fn run_from(&self, init: IterateState, streams: &mut RunStreams, x_ref: Option<&[f64]>) -> Result<RunReport> {
        init.check_dims(self.spec)?;
        let reference = match x_ref {
            Some(xs) => {
                check_len("reference solution", self.spec.n(), xs.len())?;
                let norm = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::Degenerate("reference solution is zero"));
                }
                Some((xs, norm))
            }
            None => None,
        };

        let mut records = Vec::new();
        let mut state = init;
        let mut cap_bound_from = None;
        for k in 0..self.params.max_iters {
            let (next, record) = self.iterate_once_with_ref(&state, k, streams, reference);
            let done = record.nat_residual <= self.params.tol;
            if done {
                let mut record = record;
                record.batch = 0;
                record.sample_error_sq = None;
                records.push(record);
                return Ok(self.finish(records, state, Termination::Converged, cap_bound_from));
            }
            if self.params.gradient != GradientMode::Exact
                && cap_bound_from.is_none()
                && self.params.schedule.cap_binds(k)
            {
                cap_bound_from = Some(k);
            }
            records.push(record);
            state = next;
        }
        let (_, tilde) = self.exact_tilde(&state);
        let last = self.record_for(self.params.max_iters, &state, &tilde, reference);
        let termination = if last.nat_residual <= self.params.tol {
            Termination::Converged
        } else {
            Termination::MaxIters
        };
        records.push(last);
        Ok(self.finish(records, state, termination, cap_bound_from))
    }

    fn finish(
        &self,
        records: Vec<IterRecord>,
        terminal: IterateState,
        termination: Termination,
        cap_bound_from: Option<u64>,
    ) -> RunReport {
        RunReport {
            records,
            terminal,
            termination,
            cap_bound_from,
            bound_violations: self.violations.clone(),
        }
    }
}

/// Convenience wrapper: validate, build the solver and run it.
pub fn run(spec: &GameSpec, g: &DualGraph, params: SolverParams, x_ref: Option<&[f64]>) -> Result<RunReport> {
    Solver::new(spec, g, params)?.run(x_ref)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_size_examples() {
        let s = SamplingSchedule {
            c: 1.0,
            k0: 1.0,
            a: 1.0,
            cap: None,
        };
        assert_eq!(s.batch_size(0), 1);
        let s = SamplingSchedule {
            c: 1.0,
            k0: 5.0,
            a: 0.5,
            cap: None,
        };
        assert_eq!(s.batch_size(0), 12);
        let capped = SamplingSchedule { cap: Some(100), ..s };
        assert_eq!(capped.batch_size(10_000), 100);
        assert!(capped.cap_binds(10_000));
        assert!(!capped.cap_binds(0));
    }

    #[test]
    fn batch_size_is_monotone_and_above_bound() {
        let s = SamplingSchedule {
            c: 0.7,
            k0: 2.5,
            a: 0.3,
            cap: None,
        };
        let mut prev = 0;
        for k in 0..2000 {
            let n = s.batch_size(k);
            assert!(n >= prev);
            assert!(n as f64 >= s.c * (k as f64 + s.k0).powf(s.a + 1.0));
            prev = n;
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(SamplingSchedule::default().validate().is_ok());
        let bad = SamplingSchedule {
            a: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let zero_cap = SamplingSchedule {
            cap: Some(0),
            ..Default::default()
        };
        assert!(zero_cap.validate().is_err());
    }

    #[test]
    fn csv_float_format_has_17_significant_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
        let back: f64 = fmt_f64(std::f64::consts::PI).parse().unwrap();
        assert_eq!(back, std::f64::consts::PI);
    }
}
