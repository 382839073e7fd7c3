//! `sgne`: generate benchmark instances, run the distributed solver and the
//! reference solver, sweep damping values, and check candidate solutions.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 a run stopped at its
//! iteration limit.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use sgne_core::diagnostics::{kkt_residual, natural_residual, per_agent_kkt_residual, solve_reference};
use sgne_core::experiment::{run_delta, run_experiment, LIBRARY_VERSION};
use sgne_core::instance::{load_or_solve_reference, looks_like_instance, parse_instance, InstanceFile, SolutionFile};
use sgne_core::market::{generate_instance, instance_rng};
use sgne_core::solver::{GradientMode, Solver, SolverParams, Termination};
use sgne_core::{BenchConfig, Error, GameSpec};

#[derive(Parser)]
#[command(
    name = "sgne",
    version,
    about = "Distributed stochastic generalized Nash equilibrium solver"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a benchmark instance and write it as JSON.
    Generate(CommonArgs),
    /// Run the distributed solver for one damping value.
    Solve(CommonArgs),
    /// Compute the centralized reference equilibrium.
    Oracle(CommonArgs),
    /// Run every damping value of the configuration and write one CSV each.
    Experiment(CommonArgs),
    /// Print the KKT residual of a candidate solution.
    Verify(VerifyArgs),
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// Instance file or benchmark configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Damping value; `experiment` accepts it repeatedly.
    #[arg(long, value_name = "F")]
    delta: Vec<f64>,
    #[arg(long, value_name = "N")]
    iters: Option<u64>,
    /// Stopping tolerance on the natural residual.
    #[arg(long, value_name = "F")]
    tol: Option<f64>,
    #[arg(long = "batch-c", value_name = "F")]
    batch_c: Option<f64>,
    #[arg(long = "batch-k0", value_name = "F")]
    batch_k0: Option<f64>,
    #[arg(long = "batch-a", value_name = "F")]
    batch_a: Option<f64>,
    #[arg(long = "batch-cap", value_name = "N")]
    batch_cap: Option<u64>,
    /// Use the expected gradient instead of sampling.
    #[arg(long)]
    deterministic: bool,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Instance file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// JSON with `x` (or `x_star`) and optionally `lam` (or `lam_star`).
    #[arg(long, value_name = "PATH")]
    solution: PathBuf,
}

/// Iteration budget of `solve` when neither `--iters` nor a configuration
/// file sets one.
const SOLVE_DEFAULT_ITERS: u64 = 50_000;

enum Input {
    Instance(InstanceFile),
    Bench(BenchConfig),
}

fn read_input(path: Option<&Path>) -> Result<Input, Error> {
    let Some(path) = path else {
        return Ok(Input::Bench(BenchConfig::default()));
    };
    let value: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    if looks_like_instance(&value) {
        Ok(Input::Instance(parse_instance(value)?))
    } else {
        serde_json::from_value(value)
            .map(Input::Bench)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

impl CommonArgs {
    fn apply_to_config(&self, cfg: &mut BenchConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if !self.delta.is_empty() {
            cfg.deltas = self.delta.clone();
        }
        if let Some(n) = self.iters {
            cfg.max_iters = n;
        }
        if self.tol.is_some() {
            cfg.tol = self.tol;
        }
        if let Some(v) = self.batch_c {
            cfg.batch.c = v;
        }
        if let Some(v) = self.batch_k0 {
            cfg.batch.k0 = v;
        }
        if let Some(v) = self.batch_a {
            cfg.batch.a = v;
        }
        if let Some(v) = self.batch_cap {
            cfg.batch.cap = Some(v);
        }
        cfg.deterministic |= self.deterministic;
    }

    fn single_delta(&self) -> Result<f64, Error> {
        match self.delta.as_slice() {
            [] => Ok(1.0),
            [d] => Ok(*d),
            _ => Err(Error::Config("solve takes a single --delta".into())),
        }
    }

    fn bench_config(&self, mut cfg: BenchConfig) -> Result<BenchConfig, Error> {
        self.apply_to_config(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn instance_of(input: Input, args: &CommonArgs) -> Result<(InstanceFile, GameSpec), Error> {
    match input {
        Input::Instance(file) => {
            let (spec, _) = file.to_parts()?;
            Ok((file, spec))
        }
        Input::Bench(cfg) => {
            let cfg = args.bench_config(cfg)?;
            let (spec, g) = generate_instance(&cfg, &mut instance_rng(cfg.seed))?;
            Ok((InstanceFile::from_parts(&spec, &g), spec))
        }
    }
}

fn write_json(path: &Path, value: &Value) -> Result<(), Error> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn cmd_generate(args: &CommonArgs) -> Result<ExitCode, Error> {
    let (file, _) = instance_of(read_input(args.config.as_deref())?, args)?;
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("instance.json");
            file.save(&path)?;
            println!("wrote {} (sha256 {})", path.display(), file.content_hash());
        }
        None => println!("{}", serde_json::to_string_pretty(&file)?),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle(args: &CommonArgs) -> Result<ExitCode, Error> {
    let (file, spec) = instance_of(read_input(args.config.as_deref())?, args)?;
    let reference = match &args.out {
        Some(dir) => load_or_solve_reference(&file, &spec, dir)?,
        None => solve_reference(&spec)?,
    };
    println!("{}", serde_json::to_string_pretty(&reference)?);
    Ok(ExitCode::SUCCESS)
}

fn print_run(delta: f64, termination: &str, iters: u64, nat: f64, norm_dist: Option<f64>) {
    let nd = norm_dist.map_or("n/a".to_string(), |v| format!("{v:.6e}"));
    println!("delta={delta:.2} termination={termination} iters={iters} nat_residual={nat:.6e} norm_dist={nd}");
}

fn exit_for(converged: bool) -> ExitCode {
    if converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn report_violations(violations: &[String]) {
    if let Some(first) = violations.first() {
        eprintln!(
            "warning: {} step-size bound violation(s), recorded in the manifests; first: {first}",
            violations.len()
        );
    }
}

fn sweep(cfg: BenchConfig, out: &Path) -> Result<ExitCode, Error> {
    let outcome = run_experiment(&cfg, out)?;
    for (m, r) in &outcome.runs {
        print_run(
            m.delta,
            &m.termination,
            m.iterations,
            r.last().nat_residual,
            m.final_norm_dist,
        );
    }
    // Step sizes are shared by all runs, so the violations are too.
    if let Some((m, _)) = outcome.runs.first() {
        report_violations(&m.bound_violations);
    }
    println!("wrote {} run(s) to {}", outcome.runs.len(), out.display());
    Ok(exit_for(outcome.all_converged()))
}

fn solve_instance(file: InstanceFile, args: &CommonArgs) -> Result<ExitCode, Error> {
    let (spec, g) = file.to_parts()?;
    let mode = if args.deterministic {
        GradientMode::Exact
    } else {
        GradientMode::IndependentBatches
    };
    let mut p = SolverParams::for_instance(&spec, &g, mode)?;
    p.delta = args.single_delta()?;
    p.max_iters = args.iters.unwrap_or(SOLVE_DEFAULT_ITERS);
    if let Some(t) = args.tol {
        p.tol = t;
    }
    if let Some(s) = args.seed {
        p.seed = s;
    }
    let mut cfg = BenchConfig::default();
    args.apply_to_config(&mut cfg);
    p.schedule = cfg.batch;

    let reference = match &args.out {
        Some(dir) => load_or_solve_reference(&file, &spec, dir)?,
        None => solve_reference(&spec)?,
    };
    let report = Solver::new(&spec, &g, p.clone())?.run(Some(&reference.x_star))?;
    let last = report.last();
    print_run(
        p.delta,
        report.termination.as_str(),
        last.iter,
        last.nat_residual,
        last.norm_dist,
    );
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        let csv = dir.join("trajectory.csv");
        report.write_csv(std::io::BufWriter::new(fs::File::create(&csv)?))?;
        write_json(
            &csv.with_extension("json"),
            &json!({
                "library_version": LIBRARY_VERSION,
                "seed": p.seed,
                "delta": p.delta,
                "csv": "trajectory.csv",
                "instance_hash": file.content_hash(),
                "instance": file,
                "alpha": p.steps.alpha,
                "nu": p.steps.nu,
                "sigma": p.steps.sigma,
                "tol": p.tol,
                "max_iters": p.max_iters,
                "batch": p.schedule,
                "deterministic": mode == GradientMode::Exact,
                "termination": report.termination.as_str(),
                "iterations": last.iter,
                "final_norm_dist": last.norm_dist,
            }),
        )?;
    }
    Ok(exit_for(report.termination == Termination::Converged))
}

fn cmd_solve(args: &CommonArgs) -> Result<ExitCode, Error> {
    match read_input(args.config.as_deref())? {
        Input::Instance(file) => solve_instance(file, args),
        Input::Bench(mut cfg) => {
            if args.iters.is_none() && args.config.is_none() {
                cfg.max_iters = SOLVE_DEFAULT_ITERS;
            }
            let mut cfg = args.bench_config(cfg)?;
            cfg.deltas = vec![args.single_delta()?];
            match &args.out {
                Some(dir) => sweep(cfg, dir),
                None => {
                    let (m, r) = run_delta(&cfg, cfg.deltas[0])?;
                    print_run(
                        m.delta,
                        &m.termination,
                        m.iterations,
                        r.last().nat_residual,
                        m.final_norm_dist,
                    );
                    report_violations(&m.bound_violations);
                    Ok(exit_for(m.termination == "converged"))
                }
            }
        }
    }
}

fn cmd_experiment(args: &CommonArgs) -> Result<ExitCode, Error> {
    let Input::Bench(cfg) = read_input(args.config.as_deref())? else {
        return Err(Error::Config(
            "experiment needs a benchmark configuration, not an instance file".into(),
        ));
    };
    let cfg = args.bench_config(cfg)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    sweep(cfg, &out)
}

fn cmd_verify(args: &VerifyArgs) -> Result<ExitCode, Error> {
    let Input::Instance(file) = read_input(Some(&args.config))? else {
        return Err(Error::Config(format!(
            "{} is not an instance file",
            args.config.display()
        )));
    };
    let (spec, _) = file.to_parts()?;
    let sol = SolutionFile::load(&args.solution)?;
    let m = spec.m();
    let residual = match sol.lam.len() {
        0 => kkt_residual(&spec, &sol.x, &vec![0.0; m])?,
        n if n == m => kkt_residual(&spec, &sol.x, &sol.lam)?,
        n if n == m * spec.n_agents() => {
            let duals: Vec<Vec<f64>> = sol.lam.chunks(m).map(<[f64]>::to_vec).collect();
            per_agent_kkt_residual(&spec, &sol.x, &duals)?
        }
        n => {
            return Err(Error::Config(format!(
                "solution has {n} multipliers; expected {m} or {}",
                m * spec.n_agents()
            )))
        }
    };
    let nat = natural_residual(&spec, &sol.x, 1.0)?;
    println!("stationarity_max={:.6e}", residual.max_stationarity());
    println!("primal_violation={:.6e}", residual.primal_violation);
    println!("complementarity={:.6e}", residual.complementarity);
    println!("consensus={:.6e}", residual.consensus);
    println!("natural_residual={nat:.6e}");
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
