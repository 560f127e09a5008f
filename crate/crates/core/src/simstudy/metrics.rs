//! Performance metrics per (scenario, model, cut-point) cell and their
//! bootstrap Monte Carlo standard errors.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_replicate, MetricRecord, ScenarioConfig};
use crate::posterior::AnalysisModel;
use crate::{rng, Error, Result};

/// Bootstrap resamples per MCSE estimate.
pub const DEFAULT_BOOTSTRAP: usize = 1000;
/// Minimum successful replicates for point metrics.
pub const MIN_REPS_METRICS: usize = 2;
/// Minimum successful replicates for MCSEs.
pub const MIN_REPS_MCSE: usize = 10;

const MCSE_SEED: u64 = 0x6d63_7365;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelbiasDefinition {
    /// `100 * (mean[exp(median - theta)] - 1)`.
    #[default]
    MeanRatio,
    /// `100 * (mean[exp(median)] / mean[exp(theta)] - 1)`.
    RatioOfMeans,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregateOptions {
    /// Also drop replicates whose fit had post-warmup divergences.
    pub exclude_divergent: bool,
    pub relbias: RelbiasDefinition,
    pub bootstrap: Option<usize>,
}

impl AggregateOptions {
    fn b(&self) -> usize {
        self.bootstrap.unwrap_or(DEFAULT_BOOTSTRAP)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Bias,
    Relbias,
    Coverage,
    Mse,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Bias, Metric::Relbias, Metric::Coverage, Metric::Mse];
}

/// MCSE of one metric and the jackknife-after-bootstrap SE of that MCSE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McseEstimate {
    pub mcse: f64,
    pub se: f64,
}

impl McseEstimate {
    pub const NAN: McseEstimate = McseEstimate { mcse: f64::NAN, se: f64::NAN };

    pub fn upper(&self) -> f64 {
        self.mcse + 2.0 * self.se
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub scenario_id: String,
    pub model: AnalysisModel,
    pub cutpoint: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub scenario_id: String,
    pub model: AnalysisModel,
    pub cutpoint: usize,
    pub bias: f64,
    pub bias_mcse: f64,
    pub relbias_pct: f64,
    pub relbias_mcse: f64,
    pub coverage: f64,
    pub coverage_mcse: f64,
    pub mse: f64,
    pub mse_mcse: f64,
    pub n_effective_reps: usize,
    /// `mcse + 2 se` per metric in [`Metric::ALL`] order; relative bias on
    /// the percentage scale like its estimate. Not part of the CSV output.
    #[serde(default)]
    pub mcse_upper: [f64; 4],
    /// Relative bias under the alternative definition, for audit.
    #[serde(default)]
    pub relbias_pct_alt: f64,
}

/// (estimate - truth, covered, exp(estimate), exp(truth)) per successful replicate.
struct Obs {
    err: f64,
    covered: bool,
    exp_est: f64,
    exp_true: f64,
}

fn metric_values(obs: &[&Obs], def: RelbiasDefinition) -> [f64; 4] {
    let n = obs.len() as f64;
    let bias = obs.iter().map(|o| o.err).sum::<f64>() / n;
    let relbias = match def {
        RelbiasDefinition::MeanRatio => 100.0 * (obs.iter().map(|o| o.err.exp()).sum::<f64>() / n - 1.0),
        RelbiasDefinition::RatioOfMeans => {
            100.0 * (obs.iter().map(|o| o.exp_est).sum::<f64>() / obs.iter().map(|o| o.exp_true).sum::<f64>() - 1.0)
        }
    };
    let coverage = obs.iter().filter(|o| o.covered).count() as f64 / n;
    let mse = obs.iter().map(|o| o.err * o.err).sum::<f64>() / n;
    [bias, relbias, coverage, mse]
}

fn sd(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn cell_seed(key: &CellKey) -> u64 {
    rng::child_seed(MCSE_SEED, &[key.scenario_id.as_bytes(), key.model.label().as_bytes(), &(key.cutpoint as u64).to_le_bytes()])
}

/// Bootstrap MCSE for all four metrics with jackknife-after-bootstrap SEs.
fn bootstrap_mcse(obs: &[&Obs], def: RelbiasDefinition, b: usize, seed: u64) -> [McseEstimate; 4] {
    let n = obs.len();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = vec![[0.0; 4]; b];
    // contains[s][i]: whether replicate i appears in resample s.
    let mut contains = vec![vec![false; n]; b];
    let mut sample: Vec<&Obs> = Vec::with_capacity(n);
    for s in 0..b {
        sample.clear();
        for _ in 0..n {
            let i = r.random_range(0..n);
            contains[s][i] = true;
            sample.push(obs[i]);
        }
        stats[s] = metric_values(&sample, def);
    }
    let mut out = [McseEstimate::NAN; 4];
    for (m, est) in out.iter_mut().enumerate() {
        let all: Vec<f64> = stats.iter().map(|v| v[m]).collect();
        let mcse = sd(&all);
        let loo: Vec<f64> = (0..n)
            .filter_map(|i| {
                let sub: Vec<f64> = (0..b).filter(|&s| !contains[s][i]).map(|s| stats[s][m]).collect();
                (sub.len() >= 2).then(|| sd(&sub))
            })
            .collect();
        let se = if loo.len() >= 2 {
            let k = loo.len() as f64;
            let mean = loo.iter().sum::<f64>() / k;
            ((k - 1.0) / k * loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>()).sqrt()
        } else {
            f64::NAN
        };
        *est = McseEstimate { mcse, se };
    }
    out
}

fn is_included(r: &MetricRecord, opts: &AggregateOptions) -> bool {
    r.is_success() && !(opts.exclude_divergent && r.n_divergent() > 0)
}

fn observations(records: &[&MetricRecord], opts: &AggregateOptions) -> Vec<Obs> {
    let mut included: Vec<&&MetricRecord> = records.iter().filter(|r| is_included(r, opts)).collect();
    included.sort_by_key(|r| r.replicate);
    included
        .iter()
        .map(|r| {
            let med = r.median.expect("successful record has a median");
            Obs {
                err: med - r.theta_true,
                covered: r.ci_low.is_some_and(|lo| lo <= r.theta_true) && r.ci_high.is_some_and(|hi| r.theta_true <= hi),
                exp_est: med.exp(),
                exp_true: r.theta_true.exp(),
            }
        })
        .collect()
}

/// Aggregate one cell. All records must share the same cell key.
pub fn aggregate_cell(key: &CellKey, records: &[&MetricRecord], opts: &AggregateOptions) -> Result<AggregateRow> {
    let obs = observations(records, opts);
    if obs.len() < MIN_REPS_METRICS {
        return Err(Error::InsufficientReplicates { needed: MIN_REPS_METRICS, have: obs.len() });
    }
    let refs: Vec<&Obs> = obs.iter().collect();
    let alt = match opts.relbias {
        RelbiasDefinition::MeanRatio => RelbiasDefinition::RatioOfMeans,
        RelbiasDefinition::RatioOfMeans => RelbiasDefinition::MeanRatio,
    };
    let v = metric_values(&refs, opts.relbias);
    let mc = if obs.len() >= MIN_REPS_MCSE {
        bootstrap_mcse(&refs, opts.relbias, opts.b(), cell_seed(key))
    } else {
        [McseEstimate::NAN; 4]
    };
    Ok(AggregateRow {
        scenario_id: key.scenario_id.clone(),
        model: key.model,
        cutpoint: key.cutpoint,
        bias: v[0],
        bias_mcse: mc[0].mcse,
        relbias_pct: v[1],
        relbias_mcse: mc[1].mcse,
        coverage: v[2],
        coverage_mcse: mc[2].mcse,
        mse: v[3],
        mse_mcse: mc[3].mcse,
        n_effective_reps: obs.len(),
        mcse_upper: [mc[0].upper(), mc[1].upper(), mc[2].upper(), mc[3].upper()],
        relbias_pct_alt: metric_values(&refs, alt)[1],
    })
}

fn group(records: &[MetricRecord]) -> BTreeMap<CellKey, Vec<&MetricRecord>> {
    let mut cells: BTreeMap<CellKey, Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        let key = CellKey { scenario_id: r.scenario_id.clone(), model: r.model, cutpoint: r.cutpoint };
        cells.entry(key).or_default().push(r);
    }
    cells
}

/// Per-cell results in key order; cells with too few usable replicates
/// yield their error instead of a row.
pub fn aggregate_cells(records: &[MetricRecord], opts: &AggregateOptions) -> Vec<(CellKey, Result<AggregateRow>)> {
    let cells: Vec<(CellKey, Vec<&MetricRecord>)> = group(records).into_iter().collect();
    cells
        .into_par_iter()
        .map(|(k, rs)| {
            let row = aggregate_cell(&k, &rs, opts);
            (k, row)
        })
        .collect()
}

/// Aggregate all cells; fails if any cell lacks usable replicates.
pub fn aggregate(records: &[MetricRecord], opts: &AggregateOptions) -> Result<Vec<AggregateRow>> {
    aggregate_cells(records, opts).into_iter().map(|(_, r)| r).collect()
}

/// Bootstrap MCSE of one metric for one cell's records.
pub fn mcse(records: &[&MetricRecord], metric: Metric, opts: &AggregateOptions) -> Result<McseEstimate> {
    let obs = observations(records, opts);
    if obs.len() < MIN_REPS_MCSE {
        return Err(Error::InsufficientReplicates { needed: MIN_REPS_MCSE, have: obs.len() });
    }
    let key = records
        .first()
        .map(|r| CellKey { scenario_id: r.scenario_id.clone(), model: r.model, cutpoint: r.cutpoint })
        .expect("non-empty records");
    let refs: Vec<&Obs> = obs.iter().collect();
    let all = bootstrap_mcse(&refs, opts.relbias, opts.b(), cell_seed(&key));
    let i = Metric::ALL.iter().position(|m| *m == metric).expect("metric listed");
    Ok(all[i])
}

/// Worst MCSE upper bound over all cells and metrics, with relative bias on
/// the fraction scale so one threshold applies to every metric.
fn worst_upper(records: &[MetricRecord], opts: &AggregateOptions) -> f64 {
    let mut worst: f64 = 0.0;
    for (_, row) in aggregate_cells(records, opts) {
        let Ok(row) = row else { return f64::INFINITY };
        for (m, u) in row.mcse_upper.iter().enumerate() {
            let u = if m == 1 { u / 100.0 } else { *u };
            if !u.is_finite() {
                return f64::INFINITY;
            }
            worst = worst.max(u);
        }
    }
    worst
}

/// Grow the replicate count in batches until every metric's MCSE upper bound
/// is below `threshold` or `cap` replicates have run. `produce(start, end)`
/// supplies the records of replicates `start..end`.
pub fn adapt_nsim_with<F>(threshold: f64, batch: usize, cap: usize, opts: &AggregateOptions, mut produce: F) -> Result<usize>
where
    F: FnMut(usize, usize) -> Result<Vec<MetricRecord>>,
{
    let batch = batch.max(1);
    let mut records = Vec::new();
    let mut n = 0;
    while n < cap {
        let end = (n + batch).min(cap);
        records.extend(produce(n, end)?);
        n = end;
        if threshold.is_infinite() || worst_upper(&records, opts) < threshold {
            break;
        }
    }
    Ok(n)
}

/// Replicate count reached by running `sc` in batches of 250 up to
/// `sc.n_sim`.
pub fn adapt_nsim(sc: &ScenarioConfig, threshold: f64) -> Result<usize> {
    let opts = AggregateOptions::default();
    adapt_nsim_with(threshold, 250, sc.n_sim, &opts, |a, b| {
        let reps: Vec<Vec<MetricRecord>> = (a..b).into_par_iter().map(|rep| run_replicate(sc, rep)).collect::<Result<_>>()?;
        Ok(reps.concat())
    })
}
