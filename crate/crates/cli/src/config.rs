//! Declarative run configuration for `ordsim simulate`.
//!
//! TOML by default; a `.json` extension selects JSON with the same schema.
//! Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ordsim_core::simstudy::{AggregateOptions, GridPlan};
use ordsim_core::{AnalysisModel, ControlShape, PriorConfig, PropScenario, SamplerConfig};
use serde::{Deserialize, Serialize};

/// Environment variable that overrides the configured master seed.
pub const SEED_ENV: &str = "ORDSIM_SEED";

/// Axis values; scenarios are their cross product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    pub n_obs: Vec<u64>,
    pub j: Vec<usize>,
    pub shapes: Vec<ControlShape>,
    pub props: Vec<PropScenario>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory for records, aggregates and the manifest.
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; defaults to the number of logical cores.
    #[serde(default)]
    pub jobs: Option<usize>,
    pub n_sim: usize,
    pub grid: GridAxes,
    #[serde(default = "all_models")]
    pub models: Vec<AnalysisModel>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub priors: PriorConfig,
    #[serde(default)]
    pub aggregate: AggregateOptions,
}

fn all_models() -> Vec<AnalysisModel> {
    AnalysisModel::ALL.to_vec()
}

impl RunConfig {
    pub fn parse(text: &str, json: bool) -> Result<Self> {
        let cfg: RunConfig = if json { serde_json::from_str(text)? } else { toml::from_str(text)? };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::parse(&text, json).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sim == 0 {
            bail!("n_sim must be at least 1");
        }
        if self.jobs == Some(0) {
            bail!("jobs must be at least 1");
        }
        if self.grid.j.iter().any(|&j| j < 3) {
            bail!("every j must be at least 3");
        }
        if self.grid.n_obs.iter().any(|&n| n < 2) {
            bail!("every n_obs must be at least 2");
        }
        self.sampler.validate()?;
        ordsim_core::simstudy::build_grid(&self.plan())?;
        Ok(())
    }

    /// Applies `ORDSIM_SEED` when set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?;
        }
        Ok(())
    }

    pub fn plan(&self) -> GridPlan {
        GridPlan {
            n_obs: self.grid.n_obs.clone(),
            j: self.grid.j.clone(),
            shapes: self.grid.shapes.clone(),
            props: self.grid.props.clone(),
            n_sim: self.n_sim,
            sampler: self.sampler.clone(),
            models: self.models.clone(),
            priors: self.priors,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DESK: &str = r#"
out_dir = "runs/desk"
seed = 11
n_sim = 20

[grid]
n_obs = [1500]
j = [3]
shapes = ["symmetric"]
props = [{ kind = "s1", mean_log_or = 0.405465, sigma = 0.0 }]

[sampler]
warmup = 500
post_warmup_per_chain = 500
"#;

    #[test]
    fn parses_toml_and_json_alike() {
        let a = RunConfig::parse(DESK, false).unwrap();
        let json = serde_json::to_string(&a).unwrap();
        let b = RunConfig::parse(&json, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.models.len(), 5);
        assert_eq!(a.sampler.chains, 4);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let bad = DESK.replace("n_sim = 20", "n_sim = 20\nnsims = 3");
        assert!(RunConfig::parse(&bad, false).is_err());
        let bad = DESK.replace("warmup = 500", "warmup = 500\nstepsize = 0.1");
        assert!(RunConfig::parse(&bad, false).is_err());
    }

    #[test]
    fn invalid_values_are_errors() {
        assert!(RunConfig::parse(&DESK.replace("n_sim = 20", "n_sim = 0"), false).is_err());
        assert!(RunConfig::parse(&DESK.replace("j = [3]", "j = [2]"), false).is_err());
        assert!(RunConfig::parse(&DESK.replace("warmup = 500", "warmup = 10"), false).is_err());
    }
}
