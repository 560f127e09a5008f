//! Simulation study: scenario grid, replicate execution, performance metrics
//! with bootstrap MCSEs, and resumable on-disk runs.

mod metrics;
mod runner;

pub use metrics::{
    adapt_nsim, adapt_nsim_with, aggregate, aggregate_cells, aggregate_cell, mcse, AggregateOptions, AggregateRow,
    CellKey, Metric, McseEstimate, RelbiasDefinition, DEFAULT_BOOTSTRAP,
};
pub use runner::{
    format_sig6, read_aggregate_csv, read_records, run_grid, write_aggregate_csv, write_atomic, GridRunSummary, Manifest,
    RunOptions,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dgm::{discretize_beta, gen_true_pair, sample_trial, ControlShape, PropScenario};
use crate::posterior::{AnalysisModel, PriorConfig};
use crate::sampler::{run_model, AttemptLog, SamplerConfig};
use crate::{rng, Error, Result};

/// Axis values of a simulation grid; the scenarios are their cross product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPlan {
    pub n_obs: Vec<u64>,
    pub j: Vec<usize>,
    pub shapes: Vec<ControlShape>,
    pub props: Vec<PropScenario>,
    #[serde(default = "default_n_sim")]
    pub n_sim: usize,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default = "default_models")]
    pub models: Vec<AnalysisModel>,
    #[serde(default)]
    pub priors: PriorConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_sim() -> usize {
    1000
}

fn default_models() -> Vec<AnalysisModel> {
    AnalysisModel::ALL.to_vec()
}

impl GridPlan {
    /// Every axis value: 3 sample sizes x 3 category counts x 2 shapes x 12
    /// proportionality configurations = 216 scenarios.
    pub fn full() -> Self {
        Self {
            n_obs: vec![1500, 4000, 10000],
            j: vec![3, 7, 11],
            shapes: vec![ControlShape::Symmetric, ControlShape::Skewed],
            props: PropScenario::all(),
            n_sim: default_n_sim(),
            sampler: SamplerConfig::default(),
            models: default_models(),
            priors: PriorConfig::default(),
            seed: 0,
        }
    }

    /// The proportional-odds-family configurations only (162 scenarios).
    pub fn scenario1_only() -> Self {
        Self { props: PropScenario::scenario1_set(), ..Self::full() }
    }
}

/// One simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario_id: String,
    pub n_obs: u64,
    pub j: usize,
    pub shape: ControlShape,
    pub prop: PropScenario,
    pub n_sim: usize,
    pub sampler: SamplerConfig,
    pub models: Vec<AnalysisModel>,
    pub priors: PriorConfig,
    /// Master seed; every replicate stream is derived from it.
    pub seed: u64,
}

#[derive(Serialize)]
struct IdFields<'a> {
    n_obs: u64,
    j: usize,
    shape: &'a ControlShape,
    prop: &'a PropScenario,
    sampler: &'a SamplerConfig,
    models: &'a [AnalysisModel],
    priors: &'a PriorConfig,
    seed: u64,
}

impl ScenarioConfig {
    /// Builds a scenario and derives its id. The id hashes every field that
    /// affects a replicate's output; `n_sim` is excluded so that extending a
    /// run keeps replicate identities.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_obs: u64,
        j: usize,
        shape: ControlShape,
        prop: PropScenario,
        n_sim: usize,
        sampler: SamplerConfig,
        models: Vec<AnalysisModel>,
        priors: PriorConfig,
        seed: u64,
    ) -> Result<Self> {
        if n_sim < 1 {
            return Err(Error::InvalidScenario("n_sim must be at least 1".into()));
        }
        if j < 2 {
            return Err(Error::InvalidScenario(format!("need j >= 2, got {j}")));
        }
        if models.is_empty() {
            return Err(Error::EmptyPlan("models"));
        }
        let mut sc = Self { scenario_id: String::new(), n_obs, j, shape, prop, n_sim, sampler, models, priors, seed };
        sc.scenario_id = sc.compute_id();
        Ok(sc)
    }

    fn compute_id(&self) -> String {
        let f = IdFields {
            n_obs: self.n_obs,
            j: self.j,
            shape: &self.shape,
            prop: &self.prop,
            sampler: &self.sampler,
            models: &self.models,
            priors: &self.priors,
            seed: self.seed,
        };
        let json = serde_json::to_vec(&f).expect("scenario fields serialize");
        rng::hex(&Sha256::digest(&json)[..8])
    }

    /// True when the stored id matches the fields.
    pub fn id_is_consistent(&self) -> bool {
        self.scenario_id == self.compute_id()
    }

    pub fn label(&self) -> String {
        format!("n{}-j{}-{}-{}", self.n_obs, self.j, self.shape.label(), self.prop.label())
    }

    /// Records produced per replicate (every model reports `j - 1` cut-points).
    pub fn records_per_replicate(&self) -> usize {
        self.models.len() * (self.j - 1)
    }
}

/// Cross product of the plan's axes in a fixed order.
pub fn build_grid(plan: &GridPlan) -> Result<Vec<ScenarioConfig>> {
    let axes: [(&'static str, bool); 5] = [
        ("n_obs", plan.n_obs.is_empty()),
        ("j", plan.j.is_empty()),
        ("shapes", plan.shapes.is_empty()),
        ("props", plan.props.is_empty()),
        ("models", plan.models.is_empty()),
    ];
    if let Some((name, _)) = axes.iter().find(|(_, empty)| *empty) {
        return Err(Error::EmptyPlan(name));
    }
    let mut out = Vec::new();
    for &n_obs in &plan.n_obs {
        for &j in &plan.j {
            for &shape in &plan.shapes {
                for prop in &plan.props {
                    out.push(ScenarioConfig::new(
                        n_obs,
                        j,
                        shape,
                        prop.clone(),
                        plan.n_sim,
                        plan.sampler.clone(),
                        plan.models.clone(),
                        plan.priors,
                        plan.seed,
                    )?);
                }
            }
        }
    }
    Ok(out)
}

/// Per-cut-point diagnostics carried on each record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordDiagnostics {
    /// `None` when not finite.
    pub rhat: Option<f64>,
    pub ess_bulk: Option<f64>,
    pub ess_tail: Option<f64>,
    pub n_divergent: usize,
    pub max_treedepth_hits: usize,
    /// Fit-level converged flag (all cut-points of the fit).
    pub converged: bool,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// One (replicate, model, cut-point) result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub scenario_id: String,
    pub replicate: usize,
    pub model: AnalysisModel,
    pub cutpoint: usize,
    pub theta_true: f64,
    pub median: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub diagnostics: Option<RecordDiagnostics>,
    pub refit_escalated: bool,
    pub attempts: Vec<AttemptLog>,
    pub rng_fingerprint: String,
    /// Failure reason; failed records are kept but excluded from aggregates.
    pub failure: Option<String>,
}

impl MetricRecord {
    pub fn is_success(&self) -> bool {
        self.failure.is_none() && self.median.is_some()
    }

    pub fn n_divergent(&self) -> usize {
        self.diagnostics.as_ref().map_or(0, |d| d.n_divergent)
    }

    /// Canonical ordering key within a scenario.
    pub fn sort_key(&self) -> (usize, AnalysisModel, usize) {
        (self.replicate, self.model, self.cutpoint)
    }
}

/// Seed of the sampler for one model fit in one replicate.
pub fn fit_seed(sc: &ScenarioConfig, rep: usize, model: AnalysisModel) -> u64 {
    rng::child_seed(sc.seed, &[sc.scenario_id.as_bytes(), &(rep as u64).to_le_bytes(), model.label().as_bytes()])
}

/// True cut-point log-ORs of replicate `rep`, regenerated from its stream.
pub fn rederive_theta(sc: &ScenarioConfig, rep: usize) -> Result<Vec<f64>> {
    let pi0 = discretize_beta(sc.shape, sc.j);
    let mut r = rng::replicate_rng(sc.seed, &sc.scenario_id, rep, "dgm");
    Ok(gen_true_pair(&pi0, &sc.prop, &mut r)?.theta_true)
}

/// Generate one dataset and fit every model to it. Failures inside the
/// replicate become failed records.
pub fn run_replicate(sc: &ScenarioConfig, rep: usize) -> Result<Vec<MetricRecord>> {
    if rep >= sc.n_sim {
        return Err(Error::ReplicateOutOfRange { rep, n_sim: sc.n_sim });
    }
    let fingerprint = rng::replicate_fingerprint(sc.seed, &sc.scenario_id, rep);
    let blank = |model: AnalysisModel, cutpoint: usize, theta: f64| MetricRecord {
        scenario_id: sc.scenario_id.clone(),
        replicate: rep,
        model,
        cutpoint,
        theta_true: theta,
        median: None,
        ci_low: None,
        ci_high: None,
        diagnostics: None,
        refit_escalated: false,
        attempts: Vec::new(),
        rng_fingerprint: fingerprint.clone(),
        failure: None,
    };
    let fail_all = |models: &[AnalysisModel], theta: &[f64], reason: String| -> Vec<MetricRecord> {
        models
            .iter()
            .flat_map(|&m| {
                theta.iter().enumerate().map({
                    let reason = reason.clone();
                    move |(i, &t)| MetricRecord { failure: Some(reason.clone()), ..blank(m, i + 2, t) }
                })
            })
            .collect()
    };

    let pi0 = discretize_beta(sc.shape, sc.j);
    let mut r = rng::replicate_rng(sc.seed, &sc.scenario_id, rep, "dgm");
    let data = gen_true_pair(&pi0, &sc.prop, &mut r).and_then(|tp| sample_trial(&tp, sc.n_obs, &mut r).map(|d| (tp, d)));
    let (tp, counts) = match data {
        Ok(v) => v,
        Err(e) => return Ok(fail_all(&sc.models, &sc.prop.nominal_theta(sc.j), format!("data generation: {e}"))),
    };

    let mut out = Vec::with_capacity(sc.records_per_replicate());
    for &model in &sc.models {
        let cfg = SamplerConfig { seed: fit_seed(sc, rep, model), ..sc.sampler.clone() };
        match run_model(model, &counts, &sc.priors, &cfg) {
            Ok(fit) => {
                for (q, &k) in fit.draws.cutpoints.iter().enumerate() {
                    let s = fit.summaries[q];
                    let d = &fit.diagnostics;
                    out.push(MetricRecord {
                        median: Some(s.median),
                        ci_low: Some(s.ci_low),
                        ci_high: Some(s.ci_high),
                        diagnostics: Some(RecordDiagnostics {
                            rhat: finite(d.rhat[q]),
                            ess_bulk: finite(d.ess_bulk[q]),
                            ess_tail: finite(d.ess_tail[q]),
                            n_divergent: d.n_divergent,
                            max_treedepth_hits: d.max_treedepth_hits,
                            converged: d.converged,
                        }),
                        refit_escalated: fit.escalated,
                        attempts: fit.attempts.clone(),
                        ..blank(model, k, tp.theta_true[k - 2])
                    });
                }
            }
            Err(e) => out.extend(fail_all(&[model], &tp.theta_true, format!("{model}: {e}"))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_sampler() -> SamplerConfig {
        SamplerConfig { chains: 2, warmup: 150, post_warmup_per_chain: 150, ..SamplerConfig::default() }
    }

    #[test]
    fn grid_counts() {
        let full = build_grid(&GridPlan::full()).unwrap();
        assert_eq!(full.len(), 216);
        let mut ids: Vec<_> = full.iter().map(|s| s.scenario_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 216);
        assert_eq!(build_grid(&GridPlan::scenario1_only()).unwrap().len(), 162);

        let single = GridPlan {
            n_obs: vec![1500],
            j: vec![3],
            shapes: vec![ControlShape::Symmetric],
            props: vec![PropScenario::S1 { mean_log_or: 0.0, sigma: 0.0 }],
            ..GridPlan::full()
        };
        assert_eq!(build_grid(&single).unwrap().len(), 1);
        assert!(matches!(build_grid(&GridPlan { j: vec![], ..single }), Err(Error::EmptyPlan("j"))));
    }

    #[test]
    fn id_is_stable_and_field_sensitive() {
        let p = PropScenario::S1 { mean_log_or: 0.0, sigma: 0.0 };
        let mk = |n_obs, n_sim| {
            ScenarioConfig::new(n_obs, 3, ControlShape::Symmetric, p.clone(), n_sim, tiny_sampler(), default_models(), PriorConfig::default(), 1)
                .unwrap()
        };
        assert_eq!(mk(1500, 10).scenario_id, mk(1500, 10).scenario_id);
        assert_eq!(mk(1500, 10).scenario_id, mk(1500, 20).scenario_id);
        assert_ne!(mk(1500, 10).scenario_id, mk(4000, 10).scenario_id);
        assert!(mk(1500, 10).id_is_consistent());
        assert_eq!(mk(1500, 10).scenario_id.len(), 16);
    }

    #[test]
    fn replicate_records() {
        let sc = ScenarioConfig::new(
            1500,
            3,
            ControlShape::Symmetric,
            PropScenario::S1 { mean_log_or: 0.0, sigma: 0.0 },
            5,
            tiny_sampler(),
            default_models(),
            PriorConfig::default(),
            7,
        )
        .unwrap();
        let a = run_replicate(&sc, 0).unwrap();
        assert_eq!(a.len(), sc.records_per_replicate());
        assert!(a.iter().all(|r| r.theta_true == 0.0 && r.is_success()));
        let po: Vec<_> = a.iter().filter(|r| r.model == AnalysisModel::Po).collect();
        assert!(po.windows(2).all(|w| w[0].median == w[1].median));
        assert_eq!(a, run_replicate(&sc, 0).unwrap());
        assert!(matches!(run_replicate(&sc, 5), Err(Error::ReplicateOutOfRange { rep: 5, n_sim: 5 })));
    }

    #[test]
    fn theta_is_rederivable() {
        let sc = ScenarioConfig::new(
            1500,
            7,
            ControlShape::Skewed,
            PropScenario::S1 { mean_log_or: 1.5f64.ln(), sigma: 0.2 },
            3,
            tiny_sampler(),
            vec![AnalysisModel::Po],
            PriorConfig::default(),
            3,
        )
        .unwrap();
        let recs = run_replicate(&sc, 2).unwrap();
        let theta = rederive_theta(&sc, 2).unwrap();
        for r in &recs {
            assert_eq!(r.theta_true, theta[r.cutpoint - 2]);
        }
    }
}
