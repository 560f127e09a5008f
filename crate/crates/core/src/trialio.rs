//! Trial data ingestion, complete-case filtering and the five-model case
//! analysis.
//!
//! Input files are delimited text (comma, or tab when the header contains a
//! tab) with the header `subject_id,arm,outcome`. Outcomes are category
//! indices `1..=j`; an empty outcome cell marks a missing outcome.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::PosteriorSummary;
use crate::ordcore::OrdinalCounts;
use crate::posterior::{AnalysisModel, PriorConfig};
use crate::sampler::{run_model, AttemptLog, SamplerConfig};
use crate::{Error, Result};

/// Categories with fewer observations than this in either arm are flagged.
pub const DEFAULT_SPARSE_THRESHOLD: u64 = 5;

/// Two-arm extraction from a possibly multi-arm `arm` column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSelection {
    pub control: String,
    pub treatment: String,
}

/// Declared outcome scale of one endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialSchema {
    pub name: String,
    /// Ordered category labels, lowest category first.
    pub labels: Vec<String>,
    /// When absent, the arm column must hold `0` (control) or `1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arms: Option<ArmSelection>,
}

impl TrialSchema {
    pub fn j(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() < 2 {
            return Err(Error::InvalidCounts(format!("schema {:?} needs at least 2 categories", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRow {
    pub subject_id: String,
    pub arm: u8,
    /// Category index in `1..=j`; `None` when missing.
    pub outcome: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialDataset {
    pub schema: TrialSchema,
    pub rows: Vec<TrialRow>,
    /// Rows skipped because their arm was outside the two-arm selection.
    pub n_other_arms: usize,
}

impl TrialDataset {
    pub fn j(&self) -> usize {
        self.schema.j()
    }

    /// Arm x category counts of rows with an observed outcome.
    pub fn counts(&self) -> Result<OrdinalCounts> {
        let j = self.j();
        let mut c = [vec![0u64; j], vec![0u64; j]];
        for r in &self.rows {
            if let Some(y) = r.outcome {
                c[r.arm as usize][y - 1] += 1;
            }
        }
        let [a, b] = c;
        OrdinalCounts::with_empty_arms(a, b)
    }

    pub fn n_missing(&self) -> usize {
        self.rows.iter().filter(|r| r.outcome.is_none()).count()
    }
}

fn detect_delimiter(text: &str) -> u8 {
    let header = text.lines().next().unwrap_or("");
    if header.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

/// Parse delimited trial data already in memory; `path` is used in errors.
pub fn parse_trial(text: &str, path: &Path, schema: &TrialSchema) -> Result<TrialDataset> {
    schema.validate()?;
    let perr = |row: usize, column: &str, message: String| Error::Parse { path: path.into(), row, column: column.into(), message };
    let derr = |row: usize, message: String| Error::Domain { path: path.into(), row, message };

    let mut rd = csv::ReaderBuilder::new().delimiter(detect_delimiter(text)).trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rd.headers().map_err(|e| perr(1, "header", e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| perr(1, name, "missing column".into()));
    let (c_id, c_arm, c_out) = (col("subject_id")?, col("arm")?, col("outcome")?);

    let j = schema.j();
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    let mut n_other_arms = 0;
    for (i, rec) in rd.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| perr(row, "record", e.to_string()))?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let id = field(c_id);
        if id.is_empty() {
            return Err(derr(row, "empty subject_id".into()));
        }
        let raw_arm = field(c_arm);
        let arm = match &schema.arms {
            Some(sel) if raw_arm == sel.control => 0,
            Some(sel) if raw_arm == sel.treatment => 1,
            Some(_) => {
                n_other_arms += 1;
                continue;
            }
            None => match raw_arm {
                "0" => 0,
                "1" => 1,
                "" => return Err(derr(row, "missing arm".into())),
                other => {
                    if other.parse::<i64>().is_ok() {
                        return Err(derr(row, format!("arm {other} is not 0 or 1")));
                    }
                    return Err(perr(row, "arm", format!("not an integer: {other:?}")));
                }
            },
        };
        let raw_out = field(c_out);
        let outcome = if raw_out.is_empty() || raw_out.eq_ignore_ascii_case("na") {
            None
        } else {
            let y: i64 = raw_out.parse().map_err(|_| perr(row, "outcome", format!("not an integer: {raw_out:?}")))?;
            if y < 1 || y > j as i64 {
                return Err(derr(row, format!("outcome {y} outside 1..={j} for {:?}", schema.name)));
            }
            Some(y as usize)
        };
        if !seen.insert(id.to_string()) {
            return Err(Error::DuplicateSubject { path: path.into(), row, subject_id: id.to_string() });
        }
        rows.push(TrialRow { subject_id: id.to_string(), arm, outcome });
    }
    Ok(TrialDataset { schema: schema.clone(), rows, n_other_arms })
}

pub fn load_trial(path: &Path, schema: &TrialSchema) -> Result<TrialDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trial(&text, path, schema)
}

/// Drop rows with a missing outcome. Row order is preserved.
pub fn complete_cases(d: &TrialDataset) -> Result<(TrialDataset, usize)> {
    let rows: Vec<TrialRow> = d.rows.iter().filter(|r| r.outcome.is_some()).cloned().collect();
    if rows.is_empty() {
        return Err(Error::EmptyAfterFilter);
    }
    let dropped = d.rows.len() - rows.len();
    Ok((TrialDataset { rows, ..d.clone() }, dropped))
}

/// One cut-point of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutpointResult {
    pub cutpoint: usize,
    pub summary: PosteriorSummary,
    pub rhat: f64,
    pub ess_bulk: f64,
    pub ess_tail: f64,
    /// Separate logistic fit where an arm has no events or no non-events at
    /// this cut-point; the estimate then mostly reflects the prior.
    pub prior_dominated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCaseResult {
    pub model: AnalysisModel,
    /// Empty when the fit failed.
    pub cutpoints: Vec<CutpointResult>,
    pub n_divergent: usize,
    pub max_treedepth_hits: usize,
    pub converged: bool,
    pub escalated: bool,
    pub attempts: Vec<AttemptLog>,
    pub error: Option<String>,
}

impl ModelCaseResult {
    /// Convergence trouble: failure, divergences, or R-hat/ESS below threshold.
    pub fn degraded(&self) -> bool {
        self.error.is_some() || !self.converged
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseAnalysisResult {
    pub endpoint: String,
    pub labels: Vec<String>,
    pub counts: OrdinalCounts,
    pub n_analyzed: u64,
    pub n_missing: usize,
    /// 1-based categories with fewer than `sparse_threshold` observations in
    /// either arm.
    pub sparse_categories: Vec<usize>,
    pub sparse_threshold: u64,
    pub models: Vec<ModelCaseResult>,
}

impl CaseAnalysisResult {
    pub fn model(&self, m: AnalysisModel) -> Option<&ModelCaseResult> {
        self.models.iter().find(|r| r.model == m)
    }
}

pub fn sparse_categories(counts: &OrdinalCounts, threshold: u64) -> Vec<usize> {
    (0..counts.j()).filter(|&m| counts.arm(0)[m] < threshold || counts.arm(1)[m] < threshold).map(|m| m + 1).collect()
}

/// True when the dichotomy at `k` leaves an arm without events or without
/// non-events.
pub fn dichotomy_is_degenerate(counts: &OrdinalCounts, k: usize) -> bool {
    let d = counts.dichotomize(k);
    (0..2).any(|a| d.arm(a)[0] == 0 || d.arm(a)[1] == 0)
}

fn fit_one(model: AnalysisModel, counts: &OrdinalCounts, priors: &PriorConfig, cfg: &SamplerConfig) -> ModelCaseResult {
    match run_model(model, counts, priors, cfg) {
        Ok(fit) => {
            let d = &fit.diagnostics;
            let cutpoints = fit
                .draws
                .cutpoints
                .iter()
                .enumerate()
                .map(|(q, &k)| CutpointResult {
                    cutpoint: k,
                    summary: fit.summaries[q],
                    rhat: d.rhat[q],
                    ess_bulk: d.ess_bulk[q],
                    ess_tail: d.ess_tail[q],
                    prior_dominated: model == AnalysisModel::SepLogistic && dichotomy_is_degenerate(counts, k),
                })
                .collect();
            ModelCaseResult {
                model,
                cutpoints,
                n_divergent: d.n_divergent,
                max_treedepth_hits: d.max_treedepth_hits,
                converged: d.converged,
                escalated: fit.escalated,
                attempts: fit.attempts,
                error: None,
            }
        }
        Err(e) => ModelCaseResult {
            model,
            cutpoints: Vec::new(),
            n_divergent: 0,
            max_treedepth_hits: 0,
            converged: false,
            escalated: false,
            attempts: Vec::new(),
            error: Some(e.to_string()),
        },
    }
}

/// Fit `models` to the observed outcomes of `d`. Sparse categories are
/// flagged, never merged. A failing model is reported in its own entry.
pub fn analyze_case_with(
    d: &TrialDataset,
    models: &[AnalysisModel],
    priors: &PriorConfig,
    cfg: &SamplerConfig,
    sparse_threshold: u64,
) -> Result<CaseAnalysisResult> {
    cfg.validate()?;
    let counts = d.counts()?;
    if counts.j() < 3 {
        if let Some(m) = models.iter().find(|&&m| m != AnalysisModel::SepLogistic) {
            return Err(Error::InvalidCounts(format!(
                "model {m} requires j >= 3 categories, data have {} (use sep-logistic)",
                counts.j()
            )));
        }
    }
    if counts.arm_total(0) == 0 || counts.arm_total(1) == 0 {
        return Err(Error::InvalidCounts("each arm needs at least one observed outcome".into()));
    }
    let mut results: Vec<ModelCaseResult> = models.par_iter().map(|&m| fit_one(m, &counts, priors, cfg)).collect();
    results.sort_by_key(|r| r.model);
    Ok(CaseAnalysisResult {
        endpoint: d.schema.name.clone(),
        labels: d.schema.labels.clone(),
        n_analyzed: counts.total(),
        n_missing: d.n_missing(),
        sparse_categories: sparse_categories(&counts, sparse_threshold),
        sparse_threshold,
        counts,
        models: results,
    })
}

/// All five models with default priors and sparse threshold.
pub fn analyze_case(d: &TrialDataset, cfg: &SamplerConfig) -> Result<CaseAnalysisResult> {
    analyze_case_with(d, &AnalysisModel::ALL, &PriorConfig::default(), cfg, DEFAULT_SPARSE_THRESHOLD)
}

/// One endpoint of the synthetic case-study bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEndpoint {
    pub schema: TrialSchema,
    /// Comma-delimited file contents.
    pub csv: String,
}

impl SyntheticEndpoint {
    pub fn file_stem(&self) -> &str {
        &self.schema.name
    }
}

struct EndpointDesign {
    name: &'static str,
    labels: Vec<String>,
    weights: Vec<f64>,
    /// Categories (1-based) with zero probability in both arms.
    empty_both: Vec<usize>,
    /// Categories with zero probability in the treatment arm only.
    empty_treatment: Vec<usize>,
    log_or: f64,
}

fn days_labels() -> Vec<String> {
    let mut l = vec!["dead".to_string()];
    l.extend((0..=27).map(|d| format!("{d} days")));
    l
}

fn designs() -> Vec<EndpointDesign> {
    let who = ["uninfected", "ambulatory mild", "ambulatory limited", "hospitalised no oxygen", "oxygen by mask", "high-flow oxygen", "ventilated", "dead"];
    let free_hosp = {
        let mut w = vec![0.08];
        w.extend(std::iter::repeat_n(0.004, 9));
        w.extend(std::iter::repeat_n(0.012, 10));
        w.extend(std::iter::repeat_n(0.04, 8));
        w.push(0.0);
        let rest = 1.0 - w.iter().sum::<f64>();
        *w.last_mut().expect("non-empty") = rest;
        w
    };
    let free_vent = {
        let mut w = vec![0.07];
        w.extend(std::iter::repeat_n(0.003, 26));
        w.push(0.03);
        w.push(0.0);
        let rest = 1.0 - w.iter().sum::<f64>();
        *w.last_mut().expect("non-empty") = rest;
        w
    };
    vec![
        EndpointDesign {
            name: "who8",
            labels: who.iter().map(|s| s.to_string()).collect(),
            weights: vec![0.03, 0.36, 0.27, 0.16, 0.08, 0.05, 0.03, 0.02],
            empty_both: vec![],
            empty_treatment: vec![],
            log_or: -0.2,
        },
        EndpointDesign {
            name: "ordinal5",
            labels: ["worse", "slightly worse", "unchanged", "slightly better", "better"].iter().map(|s| s.to_string()).collect(),
            weights: vec![0.1, 0.2, 0.3, 0.25, 0.15],
            empty_both: vec![],
            empty_treatment: vec![],
            log_or: 0.25,
        },
        EndpointDesign {
            name: "days_free_hospital29",
            labels: days_labels(),
            weights: free_hosp,
            empty_both: vec![3, 5, 7],
            empty_treatment: vec![9, 12],
            log_or: 0.2,
        },
        EndpointDesign {
            name: "days_free_ventilation29",
            labels: days_labels(),
            weights: free_vent,
            empty_both: vec![4, 6, 8, 10],
            empty_treatment: vec![15],
            log_or: 0.15,
        },
    ]
}

fn shifted(weights: &[f64], log_or: f64) -> Vec<f64> {
    let j = weights.len();
    let mut upper: Vec<f64> = (1..j).map(|k| weights[k..].iter().sum()).collect();
    for u in upper.iter_mut() {
        if *u > 0.0 && *u < 1.0 {
            let odds = *u / (1.0 - *u) * log_or.exp();
            *u = odds / (1.0 + odds);
        }
    }
    let mut p = vec![0.0; j];
    p[0] = 1.0 - upper[0];
    for m in 1..j - 1 {
        p[m] = (upper[m - 1] - upper[m]).max(0.0);
    }
    p[j - 1] = upper[j - 2];
    p
}

fn categorical<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let total: f64 = p.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (m, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return m;
        }
    }
    p.iter().rposition(|&w| w > 0.0).expect("some positive weight")
}

/// Synthetic datasets shaped like a small two-arm trial's endpoints: a
/// skewed 8-point scale, a 5-point scale and two 29-point days-free scales
/// with empty categories; about 3% of outcomes are missing.
pub fn synthetic_bundle(seed: u64, n_per_arm: usize) -> Vec<SyntheticEndpoint> {
    designs()
        .into_iter()
        .enumerate()
        .map(|(e, des)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5eed_0000 + e as u64));
            let mut p0 = des.weights.clone();
            for &m in &des.empty_both {
                p0[m - 1] = 0.0;
            }
            let mut p1 = shifted(&p0, des.log_or);
            for &m in &des.empty_treatment {
                p1[m - 1] = 0.0;
            }
            let mut csv = String::from("subject_id,arm,outcome\n");
            let mut id = 0;
            for (arm, p) in [(0, &p0), (1, &p1)] {
                for _ in 0..n_per_arm {
                    id += 1;
                    let y = categorical(p, &mut rng) + 1;
                    let missing = rng.random::<f64>() < 0.03;
                    let out = if missing { String::new() } else { y.to_string() };
                    writeln!(csv, "P{id:04},{arm},{out}").expect("write to string");
                }
            }
            SyntheticEndpoint { schema: TrialSchema { name: des.name.into(), labels: des.labels, arms: None }, csv }
        })
        .collect()
}

/// Per-model table rows keyed by (model, cut-point), for CSV emission.
pub fn case_rows(r: &CaseAnalysisResult) -> BTreeMap<(AnalysisModel, usize), &CutpointResult> {
    r.models.iter().flat_map(|m| m.cutpoints.iter().map(move |c| ((m.model, c.cutpoint), c))).collect()
}

/// Default path of an endpoint file inside a bundle directory.
pub fn endpoint_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(j: usize) -> TrialSchema {
        TrialSchema { name: "t".into(), labels: (1..=j).map(|i| i.to_string()).collect(), arms: None }
    }

    fn parse(text: &str, j: usize) -> Result<TrialDataset> {
        parse_trial(text, Path::new("x.csv"), &schema(j))
    }

    #[test]
    fn well_formed_and_missing() {
        let d = parse("subject_id,arm,outcome\na,0,1\nb,1,3\nc,1,\n", 8).unwrap();
        assert_eq!(d.rows.len(), 3);
        assert_eq!(d.rows[2].outcome, None);
        let tab = parse("subject_id\tarm\toutcome\na\t0\t2\n", 3).unwrap();
        assert_eq!(tab.rows[0].outcome, Some(2));
        let reordered = parse("outcome,subject_id,arm\n2,a,1\n", 3).unwrap();
        assert_eq!(reordered.rows[0].arm, 1);
    }

    #[test]
    fn errors_carry_rows() {
        match parse("subject_id,arm,outcome\na,0,1\nb,1,9\n", 8) {
            Err(Error::Domain { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("subject_id,arm,outcome\na,2,1\n", 8), Err(Error::Domain { row: 2, .. })));
        assert!(matches!(parse("subject_id,arm,outcome\na,0,x\n", 8), Err(Error::Parse { row: 2, .. })));
        assert!(matches!(parse("subject_id,arm,outcome\na,0,1\na,1,2\n", 8), Err(Error::DuplicateSubject { row: 3, .. })));
        assert!(matches!(parse("id,arm,outcome\na,0,1\n", 8), Err(Error::Parse { row: 1, .. })));
    }

    #[test]
    fn arm_selection_filters_other_arms() {
        let s = TrialSchema { arms: Some(ArmSelection { control: "low".into(), treatment: "mid".into() }), ..schema(3) };
        let d = parse_trial("subject_id,arm,outcome\na,low,1\nb,high,2\nc,mid,3\n", Path::new("x"), &s).unwrap();
        assert_eq!(d.rows.len(), 2);
        assert_eq!(d.n_other_arms, 1);
        assert_eq!(d.rows[1].arm, 1);
    }

    #[test]
    fn complete_case_filter() {
        let d = parse("subject_id,arm,outcome\na,0,1\nb,1,3\n", 3).unwrap();
        let (cc, n) = complete_cases(&d).unwrap();
        assert_eq!((cc.clone(), n), (d, 0));
        let all_missing = parse("subject_id,arm,outcome\na,0,\nb,1,\n", 3).unwrap();
        assert!(matches!(complete_cases(&all_missing), Err(Error::EmptyAfterFilter)));
        let mixed = parse("subject_id,arm,outcome\na,0,\nb,1,2\nc,0,1\n", 3).unwrap();
        let (cc, n) = complete_cases(&mixed).unwrap();
        assert_eq!(cc.rows.len() + n, 3);
        assert_eq!(cc.counts().unwrap().total(), 2);
    }

    #[test]
    fn sparse_flags() {
        let c = OrdinalCounts::new(vec![10, 0, 10], vec![10, 7, 3]).unwrap();
        assert_eq!(sparse_categories(&c, 5), vec![2, 3]);
        assert!(!dichotomy_is_degenerate(&c, 2));
        let c = OrdinalCounts::new(vec![10, 5, 0], vec![10, 7, 3]).unwrap();
        assert!(dichotomy_is_degenerate(&c, 3));
    }

    #[test]
    fn synthetic_bundle_shapes() {
        let b = synthetic_bundle(1, 150);
        let shapes: Vec<usize> = b.iter().map(|e| e.schema.j()).collect();
        assert_eq!(shapes, vec![8, 5, 29, 29]);
        for e in &b {
            let d = parse_trial(&e.csv, Path::new("s"), &e.schema).unwrap();
            assert_eq!(d.rows.len(), 300);
            let miss = d.n_missing() as f64 / 300.0;
            assert!(miss > 0.0 && miss < 0.08, "{miss}");
            if e.schema.j() == 29 {
                let c = d.counts().unwrap();
                assert!((0..29).any(|m| c.arm(0)[m] + c.arm(1)[m] == 0));
            }
        }
        assert_eq!(synthetic_bundle(1, 150), b);
    }
}
