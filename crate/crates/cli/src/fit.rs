//! `ordsim fit`: analyse one trial endpoint with one or all models.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use ordsim_core::simstudy::format_sig6;
use ordsim_core::trialio::{analyze_case_with, complete_cases, load_trial, CaseAnalysisResult, DEFAULT_SPARSE_THRESHOLD};
use ordsim_core::{AnalysisModel, PriorConfig, SamplerConfig, TrialSchema};

use crate::{seed_from_env, with_jobs, write_atomic, Outcome};

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Trial data with `subject_id`, `arm` and `outcome` columns.
    pub data: PathBuf,
    /// Outcome schema (TOML, or JSON with a .json extension). Defaults to
    /// `<data stem>.schema.toml` next to the data file.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Model to fit, repeatable or comma-separated; `all` fits all five.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    pub model: Vec<String>,
    #[arg(long, default_value_t = SamplerConfig::default().chains)]
    pub chains: usize,
    #[arg(long, default_value_t = SamplerConfig::default().warmup)]
    pub warmup: usize,
    /// Post-warmup draws per chain.
    #[arg(long, default_value_t = SamplerConfig::default().post_warmup_per_chain)]
    pub samples: usize,
    /// Sampler seed; falls back to ORDSIM_SEED, then the built-in default.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = SamplerConfig::default().target_accept)]
    pub target_accept: f64,
    #[arg(long, default_value_t = SamplerConfig::default().max_treedepth)]
    pub max_treedepth: usize,
    /// Do not refit with stricter settings after divergences.
    #[arg(long)]
    pub no_escalate: bool,
    #[arg(long, default_value_t = PriorConfig::default().sd_effect)]
    pub prior_sd_effect: f64,
    #[arg(long, default_value_t = PriorConfig::default().sd_increment)]
    pub prior_sd_increment: f64,
    /// Flag categories with fewer observations than this in either arm.
    #[arg(long, default_value_t = DEFAULT_SPARSE_THRESHOLD)]
    pub sparse_threshold: u64,
    /// Directory for `<endpoint>.fit.csv` and `<endpoint>.fit.json`.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

pub const FIT_CSV_HEADER: [&str; 13] = [
    "endpoint",
    "model",
    "cutpoint",
    "median",
    "ci_low",
    "ci_high",
    "rhat",
    "ess_bulk",
    "ess_tail",
    "n_divergent",
    "converged",
    "prior_dominated",
    "error",
];

pub fn parse_models(names: &[String]) -> Result<Vec<AnalysisModel>> {
    let mut out = Vec::new();
    for n in names {
        if n == "all" {
            out.extend(AnalysisModel::ALL);
        } else {
            out.push(n.parse::<AnalysisModel>().map_err(anyhow::Error::msg)?);
        }
    }
    out.sort();
    out.dedup();
    if out.is_empty() {
        bail!("no model selected");
    }
    Ok(out)
}

pub fn load_schema(path: &Path) -> Result<TrialSchema> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading schema {}", path.display()))?;
    let schema: TrialSchema = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::from_str(&text).with_context(|| format!("invalid schema {}", path.display()))?
    } else {
        toml::from_str(&text).with_context(|| format!("invalid schema {}", path.display()))?
    };
    schema.validate()?;
    Ok(schema)
}

/// Sibling schema file used when `--schema` is not given.
pub fn default_schema_path(data: &Path) -> PathBuf {
    let stem = data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    data.with_file_name(format!("{stem}.schema.toml"))
}

impl FitArgs {
    pub fn sampler(&self) -> Result<SamplerConfig> {
        let seed = match self.seed {
            Some(s) => s,
            None => seed_from_env()?.unwrap_or(SamplerConfig::default().seed),
        };
        let cfg = SamplerConfig {
            chains: self.chains,
            warmup: self.warmup,
            post_warmup_per_chain: self.samples,
            target_accept: self.target_accept,
            max_treedepth: self.max_treedepth,
            seed,
            escalate: !self.no_escalate,
            ..SamplerConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn sig(x: f64) -> String {
    format_sig6(x)
}

/// One CSV/table row per (model, cut-point); a failed model gives one row
/// carrying its error.
pub fn result_rows(r: &CaseAnalysisResult) -> Vec<[String; 13]> {
    let mut rows = Vec::new();
    for m in &r.models {
        if let Some(e) = &m.error {
            let mut row: [String; 13] = Default::default();
            row[0] = r.endpoint.clone();
            row[1] = m.model.to_string();
            row[10] = "false".into();
            row[12] = e.clone();
            rows.push(row);
            continue;
        }
        for c in &m.cutpoints {
            rows.push([
                r.endpoint.clone(),
                m.model.to_string(),
                c.cutpoint.to_string(),
                sig(c.summary.median),
                sig(c.summary.ci_low),
                sig(c.summary.ci_high),
                sig(c.rhat),
                sig(c.ess_bulk),
                sig(c.ess_tail),
                m.n_divergent.to_string(),
                m.converged.to_string(),
                c.prior_dominated.to_string(),
                String::new(),
            ]);
        }
    }
    rows
}

pub fn result_csv(r: &CaseAnalysisResult) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(FIT_CSV_HEADER)?;
    for row in result_rows(r) {
        w.write_record(&row)?;
    }
    Ok(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)
}

/// Human-readable summary: a header and one block per model.
pub fn result_table(r: &CaseAnalysisResult) -> String {
    let mut s = String::new();
    let sparse = if r.sparse_categories.is_empty() {
        "none".to_string()
    } else {
        r.sparse_categories.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(", ")
    };
    let _ = writeln!(s, "endpoint {} (j = {})", r.endpoint, r.labels.len());
    let _ = writeln!(s, "analysed {} complete cases, {} missing outcomes excluded", r.n_analyzed, r.n_missing);
    let _ = writeln!(s, "sparse categories (< {} in an arm): {sparse}", r.sparse_threshold);
    let rows = result_rows(r);
    for m in &r.models {
        let status = match (&m.error, m.converged) {
            (Some(_), _) => "FAILED",
            (None, true) => "converged",
            (None, false) => "DEGRADED",
        };
        let _ = writeln!(
            s,
            "\n== {} [{status}] divergences {} treedepth hits {}{}",
            m.model,
            m.n_divergent,
            m.max_treedepth_hits,
            if m.escalated { " (refit with stricter settings)" } else { "" }
        );
        if let Some(e) = &m.error {
            let _ = writeln!(s, "   error: {e}");
            continue;
        }
        let _ = writeln!(
            s,
            "   {:>4} {:>12} {:>12} {:>12} {:>9} {:>9} {:>9}",
            "cut", "median", "2.5%", "97.5%", "rhat", "ess_bulk", "ess_tail"
        );
        for row in rows.iter().filter(|row| row[1] == m.model.label()) {
            let flag = if row[11] == "true" { "  prior-dominated" } else { "" };
            let _ = writeln!(
                s,
                "   {:>4} {:>12} {:>12} {:>12} {:>9} {:>9} {:>9}{flag}",
                row[2], row[3], row[4], row[5], row[6], row[7], row[8]
            );
        }
    }
    s
}

pub fn run(args: &FitArgs, jobs: Option<usize>) -> Result<Outcome> {
    let models = parse_models(&args.model)?;
    let cfg = args.sampler()?;
    let priors = PriorConfig { sd_effect: args.prior_sd_effect, sd_increment: args.prior_sd_increment };
    let schema_path = args.schema.clone().unwrap_or_else(|| default_schema_path(&args.data));
    if !schema_path.exists() {
        bail!("schema file not found: {}", schema_path.display());
    }
    let schema = load_schema(&schema_path)?;
    let data = load_trial(&args.data, &schema)?;
    let (complete, _) = complete_cases(&data)?;
    let mut result = with_jobs(jobs, || analyze_case_with(&complete, &models, &priors, &cfg, args.sparse_threshold))??;
    // Missing outcomes are counted against the full dataset.
    result.n_missing = data.n_missing();

    print!("{}", result_table(&result));
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let stem = &result.endpoint;
    write_atomic(&args.out.join(format!("{stem}.fit.csv")), &result_csv(&result)?)?;
    write_atomic(&args.out.join(format!("{stem}.fit.json")), &serde_json::to_vec_pretty(&result)?)?;
    Ok(if result.models.iter().any(|m| m.error.is_some()) { Outcome::Partial } else { Outcome::Success })
}
