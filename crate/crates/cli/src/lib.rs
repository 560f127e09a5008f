//! Command-line surface of `ordsim`: scenario simulation, single-dataset
//! fitting, reports and self-verification.
//!
//! Exit codes: 0 success, 1 usage, configuration or I/O error, 2 partial
//! computational failure (failed replicates or model fits).

pub mod config;
pub mod fit;
pub mod report;
pub mod simulate;
mod svg;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ordsim_core::trialio::synthetic_bundle;
use ordsim_core::{verify, SamplerConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ordsim", version, about = "Bayesian ordinal-model simulation studies and trial analyses")]
pub struct Cli {
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario grid from a configuration file.
    Simulate(simulate::SimulateArgs),
    /// Fit one or all models to a trial endpoint.
    Fit(fit::FitArgs),
    /// Emit tidy CSV or SVG plots from run or case-study outputs.
    Report(report::ReportArgs),
    /// Run built-in verification suites.
    Validate(ValidateArgs),
    /// Write the synthetic four-endpoint trial bundle with schemas.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Gradients,
    Oracle,
    Sampler,
    Dgm,
    All,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: Suite,
    /// Seed for the randomized checks.
    #[arg(long, default_value_t = 20_240_601)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for `<endpoint>.csv` and `<endpoint>.schema.toml`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    #[arg(long, default_value_t = 250)]
    pub n_per_arm: usize,
}

/// How a successful command ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Partial,
}

/// Parse arguments, execute, and map the result to an exit code. Errors go
/// to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(Outcome::Success) => EXIT_OK,
        Ok(Outcome::Partial) => EXIT_PARTIAL,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }
    }
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    if cli.jobs == Some(0) {
        anyhow::bail!("--jobs must be at least 1");
    }
    match &cli.command {
        Command::Simulate(a) => simulate::run(a, cli.jobs),
        Command::Fit(a) => fit::run(a, cli.jobs),
        Command::Report(a) => {
            for p in report::run(a)? {
                eprintln!("wrote {}", p.display());
            }
            Ok(Outcome::Success)
        }
        Command::Validate(a) => with_jobs(cli.jobs, || validate(a))?,
        Command::Synth(a) => synth(a),
    }
}

/// Run `f` on a pool of `jobs` threads, or on the global pool.
pub fn with_jobs<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match jobs {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().context("building worker pool")?;
            Ok(pool.install(f))
        }
    }
}

/// `ORDSIM_SEED`, when set.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(config::SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{}={v:?} is not an unsigned integer", config::SEED_ENV))?)),
        Err(_) => Ok(None),
    }
}

/// Temp-file-and-rename write.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    ordsim_core::simstudy::write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn validate(a: &ValidateArgs) -> Result<Outcome> {
    let cfg = SamplerConfig { seed: a.seed, ..SamplerConfig::default() };
    let want = |s: Suite| a.suite == s || a.suite == Suite::All;
    let mut reports = Vec::new();
    if want(Suite::Gradients) {
        reports.push(verify::gradient_suite(100, a.seed));
    }
    if want(Suite::Oracle) {
        reports.push(verify::oracle_suite(&cfg));
    }
    if want(Suite::Sampler) {
        reports.push(verify::sampler_suite(&cfg));
    }
    if want(Suite::Dgm) {
        reports.push(verify::dgm_suite());
    }
    let mut ok = true;
    for r in &reports {
        print!("{r}");
        ok &= r.passed();
    }
    let n: usize = reports.iter().map(|r| r.checks.len()).sum();
    let failed: usize = reports.iter().map(|r| r.checks.iter().filter(|c| !c.passed).count()).sum();
    println!("{} checks, {failed} failed", n);
    Ok(if ok { Outcome::Success } else { Outcome::Partial })
}

fn synth(a: &SynthArgs) -> Result<Outcome> {
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for e in synthetic_bundle(a.seed, a.n_per_arm) {
        let stem = e.file_stem().to_string();
        write_atomic(&a.out.join(format!("{stem}.csv")), e.csv.as_bytes())?;
        write_atomic(&a.out.join(format!("{stem}.schema.toml")), toml::to_string(&e.schema)?.as_bytes())?;
        eprintln!("wrote {stem}.csv ({} categories)", e.schema.j());
    }
    Ok(Outcome::Success)
}
