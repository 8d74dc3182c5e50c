use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ngvi_bench::data::load_csv;
use ngvi_bench::error::{BenchError, Result};
use ngvi_bench::experiment::{run_experiment, run_linesearch, Clock, Direction, ExperimentConfig, OptimizerKind, RunOutput};
use ngvi_bench::trace::{emit_trace, write_sidecar, TraceFormat};
use ngvi_bench::{gradcheck, synth};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "ngvi", version, about = "Natural-gradient sparse GP experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stochastic optimization with a step-size schedule.
    Fit(FitArgs),
    /// Full-batch steps with the step size chosen by Brent's method.
    Linesearch(LinesearchArgs),
    /// Finite-difference and Fisher-oracle checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic dataset as CSV.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = ["gaussian", "studentt", "bernoulli", "beta", "ordinal"])]
    likelihood: String,
    #[arg(long, default_value_t = 100)]
    m: usize,
    #[arg(long, default_value_t = 5000)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.9)]
    split: f64,
    #[arg(long, default_value_t = 51)]
    ordinal_bins: usize,
    /// nat, sqrtnat, lognat, meanvar, sqrtmeanvar or logmeanvar.
    #[arg(long)]
    parameterization: Option<String>,
    #[arg(long, default_value_t = ngvi::quadrature::DEFAULT_POINTS)]
    quad_points: usize,
    #[arg(long)]
    eval_every: Option<usize>,
    /// `off` writes zero wall times so repeated runs give identical files.
    #[arg(long, value_enum, default_value_t = Clock::Wall)]
    clock: Clock,
    /// Trace file; `.json` selects JSON, anything else CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    optimizer: OptimizerKind,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    gamma_init: f64,
    #[arg(long, default_value_t = 1e-1)]
    gamma_final: f64,
    #[arg(long, default_value_t = 5)]
    ramp: usize,
    /// Step size for GD and Adam.
    #[arg(long, default_value_t = 1e-2)]
    adam_lr: f64,
    #[arg(long)]
    learn_hypers: bool,
}

#[derive(Args)]
struct LinesearchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value_t = Direction::Natural)]
    direction: Direction,
    /// Upper end of the step-size bracket.
    #[arg(long, default_value_t = 1.0)]
    gamma_max: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Regression,
    Classification,
    Illconditioned,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn base_config(c: &Common) -> ExperimentConfig {
    ExperimentConfig {
        likelihood: c.likelihood.clone(),
        ordinal_bins: c.ordinal_bins,
        m: c.m,
        iters: c.iters,
        seed: c.seed,
        split: c.split,
        quadrature_points: c.quad_points,
        parameterization: c.parameterization.clone(),
        eval_every: c.eval_every,
        clock: c.clock,
        ..Default::default()
    }
}

/// Writes the trace (partial on failure) and the config sidecar.
fn finish<T: Serialize>(out: &RunOutput, path: &Path, sidecar: &T) -> Result<()> {
    emit_trace(&out.trace, path, TraceFormat::from_path(path))?;
    write_sidecar(path, sidecar)?;
    match &out.failure {
        Some(e) => Err(BenchError::Numerical(e.clone())),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct LinesearchSidecar {
    #[serde(flatten)]
    config: ExperimentConfig,
    direction: Direction,
    gamma_max: f64,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(a) => {
            let config = ExperimentConfig {
                batch: a.batch,
                gamma_initial: a.gamma_init,
                gamma_final: a.gamma_final,
                ramp: a.ramp,
                optimizer: a.optimizer,
                adam_lr: a.adam_lr,
                learn_hypers: a.learn_hypers,
                ..base_config(&a.common)
            };
            let ds = load_csv(&a.common.data, a.common.likelihood == "ordinal")?;
            let out = run_experiment(&config, &ds)?;
            finish(&out, &a.common.out, &config.resolved()?)
        }
        Command::Linesearch(a) => {
            let ds = load_csv(&a.common.data, a.common.likelihood == "ordinal")?;
            let config = ExperimentConfig {
                batch: ds.len(),
                ..base_config(&a.common)
            };
            let out = run_linesearch(&config, &ds, a.direction, a.gamma_max)?;
            let sidecar = LinesearchSidecar {
                config: config.resolved()?,
                direction: a.direction,
                gamma_max: a.gamma_max,
            };
            finish(&out, &a.common.out, &sidecar)
        }
        Command::Gradcheck { seed } => {
            let results = gradcheck::run_all(seed);
            let failed = results.iter().filter(|r| !r.passed()).count();
            for r in &results {
                println!("{r}");
            }
            println!("{} checks, {failed} failed", results.len());
            if failed > 0 {
                return Err(BenchError::Numerical(ngvi::Error::NonFinite(format!("{failed} gradient checks failed"))));
            }
            Ok(())
        }
        Command::Synth(a) => {
            let ds = match a.kind {
                SynthKind::Regression => synth::regression(a.n, a.d, a.seed)?,
                SynthKind::Classification => synth::classification(a.n, a.d, a.seed)?,
                SynthKind::Illconditioned => synth::illconditioned(a.n, a.seed)?,
            };
            ds.write_csv(&a.out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
