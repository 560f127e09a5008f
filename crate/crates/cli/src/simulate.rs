//! `ordsim simulate`: run a scenario grid into an output directory.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{bail, Result};
use clap::Args;
use ordsim_core::simstudy::{build_grid, run_grid, RunOptions};
use ordsim_core::ScenarioConfig;

use crate::config::RunConfig;
use crate::{with_jobs, Outcome};

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Run configuration (TOML, or JSON with a .json extension).
    pub config: PathBuf,
    /// Keep complete replicates already on disk and run only the rest.
    #[arg(long)]
    pub resume: bool,
    /// Comma-separated scenario filters: an id prefix or a label substring.
    #[arg(long, value_delimiter = ',')]
    pub scenarios: Vec<String>,
    /// Replace the configured number of replicates per scenario.
    #[arg(long)]
    pub nsim_override: Option<usize>,
    /// Drop replicates whose fit had post-warmup divergences from aggregates.
    #[arg(long)]
    pub exclude_divergent: bool,
    /// Write the output under this directory instead of the configured one.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Suppress per-replicate progress on standard error.
    #[arg(long, short)]
    pub quiet: bool,
}

/// Scenarios whose id starts with, or whose label contains, any filter.
pub fn select_scenarios(all: Vec<ScenarioConfig>, filters: &[String]) -> Result<Vec<ScenarioConfig>> {
    if filters.is_empty() {
        return Ok(all);
    }
    let keep: Vec<ScenarioConfig> = all
        .into_iter()
        .filter(|s| filters.iter().any(|f| s.scenario_id.starts_with(f.as_str()) || s.label().contains(f.as_str())))
        .collect();
    if keep.is_empty() {
        bail!("no scenario matches --scenarios {}", filters.join(","));
    }
    Ok(keep)
}

pub fn run(args: &SimulateArgs, jobs: Option<usize>) -> Result<Outcome> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.apply_seed_env()?;
    if let Some(n) = args.nsim_override {
        if n == 0 {
            bail!("--nsim-override must be at least 1");
        }
        cfg.n_sim = n;
    }
    if args.exclude_divergent {
        cfg.aggregate.exclude_divergent = true;
    }
    let scenarios = select_scenarios(build_grid(&cfg.plan())?, &args.scenarios)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let opts = RunOptions { resume: args.resume, aggregate: cfg.aggregate };

    let total: usize = scenarios.iter().map(|s| s.n_sim).sum();
    let done = AtomicUsize::new(0);
    let quiet = args.quiet;
    let summary = with_jobs(jobs.or(cfg.jobs), || {
        run_grid(&scenarios, &out, &opts, |sc, rep, _| {
            let k = done.fetch_add(1, Ordering::Relaxed) + 1;
            if !quiet {
                eprintln!("[{k}/{total}] {} ({}) replicate {rep}", sc.scenario_id, sc.label());
            }
        })
    })??;

    // Failed records are kept on disk; report each failed fit once.
    let labels: std::collections::BTreeMap<&str, String> =
        scenarios.iter().map(|s| (s.scenario_id.as_str(), s.label())).collect();
    let mut reported = BTreeSet::new();
    for sc in &scenarios {
        let recs = ordsim_core::simstudy::read_records(&out.join("records").join(format!("{}.ndjson", sc.scenario_id)))?;
        for r in recs.iter().filter(|r| r.failure.is_some()) {
            if reported.insert((r.scenario_id.clone(), r.replicate, r.model)) {
                eprintln!(
                    "failed: scenario {} ({}) replicate {} model {}: {}",
                    r.scenario_id,
                    labels.get(r.scenario_id.as_str()).map_or("", String::as_str),
                    r.replicate,
                    r.model,
                    r.failure.as_deref().unwrap_or("")
                );
            }
        }
    }
    for (key, reason) in &summary.skipped_cells {
        eprintln!("no aggregate: scenario {} model {} cut-point {}: {reason}", key.scenario_id, key.model, key.cutpoint);
    }
    eprintln!(
        "{} scenarios, {} replicates run, {} records ({} failed), {} aggregate rows -> {}",
        scenarios.len(),
        summary.n_replicates_run,
        summary.n_records,
        summary.n_failed,
        summary.rows.len(),
        out.display()
    );
    Ok(if summary.is_partial() { Outcome::Partial } else { Outcome::Success })
}
