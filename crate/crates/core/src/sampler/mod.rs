//! No-U-Turn sampler, multi-chain orchestration and model fitting.

mod adapt;
mod nuts;

pub use nuts::nuts_chain;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{summarize, DiagnosticsBundle, PosteriorSummary};
use crate::ordcore::OrdinalCounts;
use crate::posterior::{AnalysisModel, ModelSpec, ModelVariant, PosteriorTarget, PriorConfig};
use crate::{rng, Error, Result};

/// A differentiable log density. Implementations must be reentrant: chains
/// evaluate the same target concurrently.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    /// Writes the gradient into `grad` and returns the log density, or
    /// `-inf` outside the support.
    fn log_density(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub post_warmup_per_chain: usize,
    pub target_accept: f64,
    pub max_treedepth: usize,
    pub seed: u64,
    pub divergence_energy_threshold: f64,
    /// Half-width of the uniform jitter applied to starting points.
    pub init_jitter: f64,
    /// Refit once with stricter settings when post-warmup divergences occur.
    pub escalate: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 3750,
            post_warmup_per_chain: 3750,
            target_accept: 0.8,
            max_treedepth: 10,
            seed: 20_240_601,
            divergence_energy_threshold: 1000.0,
            init_jitter: 1.0,
            escalate: true,
        }
    }
}

pub const ESCALATED_TARGET_ACCEPT: f64 = 0.99;
pub const ESCALATED_MAX_TREEDEPTH: usize = 12;

impl SamplerConfig {
    /// Reduced settings used for desk-scale simulation runs: 4 x (500 + 500).
    pub fn desk() -> Self {
        Self { warmup: 500, post_warmup_per_chain: 500, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSamplerConfig(m));
        if self.warmup < 150 {
            return bad(format!("warmup must be at least 150, got {}", self.warmup));
        }
        if self.chains < 2 {
            return bad(format!("need at least 2 chains, got {}", self.chains));
        }
        if self.post_warmup_per_chain < 4 {
            return bad(format!("need at least 4 post-warmup draws per chain, got {}", self.post_warmup_per_chain));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad(format!("target_accept must lie in (0, 1), got {}", self.target_accept));
        }
        if !(self.divergence_energy_threshold > 0.0) {
            return bad("divergence_energy_threshold must be positive".into());
        }
        if !(self.init_jitter >= 0.0 && self.init_jitter.is_finite()) {
            return bad("init_jitter must be finite and non-negative".into());
        }
        Ok(())
    }

    fn escalated(&self) -> Self {
        Self {
            target_accept: self.target_accept.max(ESCALATED_TARGET_ACCEPT),
            max_treedepth: self.max_treedepth.max(ESCALATED_MAX_TREEDEPTH),
            ..self.clone()
        }
    }
}

/// Per-draw sampler statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawStats {
    pub treedepth: usize,
    pub n_leapfrog: usize,
    pub divergent: bool,
    pub accept_stat: f64,
    pub energy: f64,
    pub step_size: f64,
}

/// One chain's retained draws (unconstrained parameters) and statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub chain_id: usize,
    pub draws: Vec<Vec<f64>>,
    pub stats: Vec<DrawStats>,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub warmup_divergent: usize,
    pub max_treedepth: usize,
}

impl ChainOutput {
    pub fn n_divergent(&self) -> usize {
        self.stats.iter().filter(|s| s.divergent).count()
    }

    pub fn treedepth_hits(&self) -> usize {
        self.stats.iter().filter(|s| s.treedepth >= self.max_treedepth).count()
    }

    /// Draws of coordinate `i`.
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[i]).collect()
    }
}

/// Run `inits.len()` chains in parallel. Output order follows chain id and
/// does not depend on scheduling.
pub fn run_chains<T: LogDensity + ?Sized>(target: &T, inits: &[Vec<f64>], cfg: &SamplerConfig) -> Result<Vec<ChainOutput>> {
    cfg.validate()?;
    inits.par_iter().enumerate().map(|(c, init)| nuts_chain(target, init, cfg, c)).collect()
}

/// Settings and outcome of one sampling attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptLog {
    pub target_accept: f64,
    pub max_treedepth: usize,
    pub n_divergent: usize,
    pub treedepth_hits: usize,
}

/// A single-spec fit: the chains of the final attempt plus the attempt log.
#[derive(Debug, Clone)]
pub struct SpecFit {
    pub spec: ModelSpec,
    pub chains: Vec<ChainOutput>,
    pub attempts: Vec<AttemptLog>,
}

impl SpecFit {
    pub fn n_divergent(&self) -> usize {
        self.chains.iter().map(ChainOutput::n_divergent).sum()
    }

    pub fn treedepth_hits(&self) -> usize {
        self.chains.iter().map(ChainOutput::treedepth_hits).sum()
    }

    /// Cut-point log-OR draws, `[cutpoint][chain][draw]`.
    pub fn cutpoint_draws(&self) -> Vec<Vec<Vec<f64>>> {
        let nq = self.spec.cutpoints().len();
        let mut out = vec![Vec::with_capacity(self.chains.len()); nq];
        for ch in &self.chains {
            let mut per_q = vec![Vec::with_capacity(ch.draws.len()); nq];
            for d in &ch.draws {
                for (q, v) in self.spec.cutpoint_log_ors(d).into_iter().enumerate() {
                    per_q[q].push(v);
                }
            }
            for (o, v) in out.iter_mut().zip(per_q) {
                o.push(v);
            }
        }
        out
    }
}

/// Fit one spec: jittered per-chain starting points, parallel chains, and a
/// single escalated refit when the first attempt diverged.
pub fn fit_spec(spec: &ModelSpec, data: &OrdinalCounts, cfg: &SamplerConfig) -> Result<SpecFit> {
    cfg.validate()?;
    let target = PosteriorTarget::new(spec, data)?;
    let init_seed = rng::child_seed(cfg.seed, &[b"init"]);
    let inits = (0..cfg.chains)
        .map(|c| spec.initial_point(data, &mut rng::chain_rng(init_seed, c), cfg.init_jitter).map(|p| p.0))
        .collect::<Result<Vec<_>>>()?;

    let mut attempts = Vec::new();
    let mut run = |cfg: &SamplerConfig| -> Result<Vec<ChainOutput>> {
        let chains = run_chains(&target, &inits, cfg)?;
        attempts.push(AttemptLog {
            target_accept: cfg.target_accept,
            max_treedepth: cfg.max_treedepth,
            n_divergent: chains.iter().map(ChainOutput::n_divergent).sum(),
            treedepth_hits: chains.iter().map(ChainOutput::treedepth_hits).sum(),
        });
        Ok(chains)
    };
    let mut chains = run(cfg)?;
    if cfg.escalate && chains.iter().any(|c| c.n_divergent() > 0) {
        chains = run(&cfg.escalated())?;
    }
    Ok(SpecFit { spec: spec.clone(), chains, attempts })
}

/// Cut-point log-OR draws with chain structure kept: `values[q][chain][draw]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub cutpoints: Vec<usize>,
    pub values: Vec<Vec<Vec<f64>>>,
}

impl PosteriorDraws {
    pub fn n_chains(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Total retained draws per quantity across chains.
    pub fn n_rows(&self) -> usize {
        self.values.first().map_or(0, |q| q.iter().map(Vec::len).sum())
    }

    pub fn pooled(&self, q: usize) -> Vec<f64> {
        self.values[q].concat()
    }
}

/// Everything produced by fitting one analysis model to one dataset.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: AnalysisModel,
    pub draws: PosteriorDraws,
    pub summaries: Vec<PosteriorSummary>,
    pub diagnostics: DiagnosticsBundle,
    /// Attempts of every underlying fit, in cut-point order for separate
    /// logistic models.
    pub attempts: Vec<AttemptLog>,
    pub escalated: bool,
}

/// Fit `model` to `data`. Separate logistic regression runs one fit per
/// cut-point on the dichotomized data and assembles the results by cut-point.
pub fn run_model(model: AnalysisModel, data: &OrdinalCounts, priors: &PriorConfig, cfg: &SamplerConfig) -> Result<FitOutcome> {
    let specs = model.specs(data.j(), priors)?;
    let mut cutpoints = Vec::new();
    let mut values = Vec::new();
    let mut attempts = Vec::new();
    let (mut n_div, mut hits) = (0, 0);
    for spec in &specs {
        let d = match spec.variant {
            ModelVariant::SepLogistic { cutpoint } => data.dichotomize(cutpoint),
            _ => data.clone(),
        };
        let sub_cfg = match spec.variant {
            ModelVariant::SepLogistic { cutpoint } => {
                SamplerConfig { seed: rng::child_seed(cfg.seed, &[b"cutpoint", &(cutpoint as u64).to_le_bytes()]), ..cfg.clone() }
            }
            _ => cfg.clone(),
        };
        let fit = fit_spec(spec, &d, &sub_cfg)?;
        cutpoints.extend(spec.cutpoints());
        values.extend(fit.cutpoint_draws());
        n_div += fit.n_divergent();
        hits += fit.treedepth_hits();
        attempts.extend(fit.attempts);
    }
    let summaries = values.iter().map(|q| summarize(&q.concat())).collect();
    let diagnostics = DiagnosticsBundle::compute(&values, n_div, hits);
    let escalated = attempts.len() > specs.len();
    Ok(FitOutcome { model, draws: PosteriorDraws { cutpoints, values }, summaries, diagnostics, attempts, escalated })
}
