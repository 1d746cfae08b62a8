use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use cumppi::bench::{append_csv, bench_controller};
use cumppi::controller::Variant;
use cumppi::runner::{run_trials, RunOptions};
use cumppi::scenario::{LoadError, Overrides, Scenario};

/// Crowd navigation simulator for MPPI, U-MPPI and C2U-MPPI.
#[derive(Debug, Parser)]
#[command(name = "cumppi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run seeded trials of a scenario and write CSV/JSON results.
    Run(RunArgs),
    /// Check a scenario file and list every violation.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Time single controller iterations on a frozen corridor snapshot.
    Bench(BenchArgs),
    /// Print a bundled scenario as JSON.
    Example {
        #[arg(value_enum)]
        which: Bundled,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Bundled {
    Empty,
    Corridor,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// mppi, umppi or c2umppi; defaults to the scenario's controller.
    #[arg(long)]
    controller: Option<String>,
    /// Master seed of trial 0; trial i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    #[arg(long)]
    out: PathBuf,
    /// Risk sensitivity of the goal cost.
    #[arg(long)]
    gamma: Option<f64>,
    /// Collision probability bound.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    np_seconds: Option<f64>,
    #[arg(long)]
    horizon_steps: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    /// Rollouts (mppi) and sigma batches (umppi, c2umppi).
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Rollout threads, 0 for all cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Write zero execution times so outputs are reproducible.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value = "c2umppi")]
    controller: String,
    #[arg(long, default_value_t = 70)]
    horizon_steps: usize,
    /// Rollouts (mppi) or sigma batches (umppi, c2umppi).
    #[arg(long, default_value_t = 150)]
    samples: usize,
    #[arg(long, default_value_t = 30)]
    repetitions: usize,
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// CSV file the result is appended to.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_variant(name: &str) -> anyhow::Result<Variant> {
    name.parse::<Variant>().map_err(anyhow::Error::from)
}

fn run(args: RunArgs) -> anyhow::Result<ExitCode> {
    let variant = args.controller.as_deref().map(parse_variant).transpose()?;
    let mut scenario = Scenario::from_path(&args.scenario)?;
    Overrides {
        variant,
        seed: args.seed,
        gamma_rs: args.gamma,
        delta: args.delta,
        np_seconds: args.np_seconds,
        horizon_steps: args.horizon_steps,
        dt_s: args.dt,
        n_rollouts: args.samples,
        n_batches: args.samples,
        lambda: args.lambda,
        workers: args.workers,
    }
    .apply(&mut scenario);
    let violations = scenario.validate();
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("invalid configuration: {v}");
        }
        return Ok(ExitCode::FAILURE);
    }
    let summary = run_trials(&scenario, args.trials, Some(&args.out), RunOptions { timing: !args.no_timing })
        .context("run failed")?;
    let agg = &summary.aggregate;
    println!(
        "{} {}: {} trials, {} failed, collisions {:.2} ± {:.2} per trial, E_dyn {:.3}, v_av {:.3} m/s, d_av {:.2} m, t_exec {:.2} ms",
        scenario.name,
        scenario.controller.variant,
        agg.trials,
        agg.failed,
        agg.n_c.mean,
        agg.n_c.std,
        agg.e_dyn.mean,
        agg.v_av.mean,
        agg.d_av.mean,
        agg.t_exec_ms.mean,
    );
    Ok(if agg.failed > 0 { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn validate(path: PathBuf) -> anyhow::Result<ExitCode> {
    let scenario = match Scenario::from_path(&path) {
        Ok(s) => s,
        Err(e @ LoadError::Io { .. }) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(2));
        }
        Err(e @ LoadError::Parse { .. }) => {
            eprintln!("invalid: {e}");
            return Ok(ExitCode::FAILURE);
        }
    };
    let violations = scenario.validate();
    for v in &violations {
        println!("{v}");
    }
    if violations.is_empty() {
        println!("{}: ok", path.display());
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::FAILURE)
    }
}

fn bench(args: BenchArgs) -> anyhow::Result<ExitCode> {
    let variant = parse_variant(&args.controller)?;
    let r = bench_controller(variant, args.horizon_steps, args.samples, args.repetitions, args.workers)?;
    println!(
        "{} N={} samples={} workers={}: {:.3} ± {:.3} ms (p50 {:.3}, p90 {:.3}, p99 {:.3}) over {} reps",
        r.controller, r.horizon_steps, r.samples, r.workers, r.mean_ms, r.std_ms, r.p50_ms, r.p90_ms, r.p99_ms, r.repetitions
    );
    if let Some(path) = args.out {
        append_csv(&path, &r)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Validate { scenario } => validate(scenario),
        Command::Bench(args) => bench(args),
        Command::Example { which } => {
            let s = match which {
                Bundled::Empty => Scenario::empty_world(),
                Bundled::Corridor => Scenario::desk_corridor(),
            };
            println!("{}", s.to_json());
            Ok(ExitCode::SUCCESS)
        }
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
