//! Self-verification suites: finite-difference gradients, a dense-grid
//! posterior oracle, analytic sampler targets and data-generation identities.
//!
//! Each suite returns a [`SuiteReport`] with one line per check.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{ess_bulk, quantile};
use crate::dgm::{discretize_beta, gen_scenario2, gen_scenario3, ControlShape};
use crate::ordcore::{log_sigmoid, sigmoid, OrdinalCounts};
use crate::posterior::{ModelSpec, ModelVariant, ParamVector, PriorConfig};
use crate::sampler::{fit_spec, run_chains, LogDensity, SamplerConfig};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    fn new(suite: &str) -> Self {
        Self { suite: suite.into(), checks: Vec::new() }
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), passed, detail: detail.into() });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "[{}] {} {}: {}", self.suite, if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gradients

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, 1)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Largest relative error between the analytic gradient and central finite
/// differences at `x`.
pub fn max_fd_error(spec: &ModelSpec, data: &OrdinalCounts, x: &[f64], h: f64) -> Result<f64> {
    let g = spec.log_posterior(&ParamVector(x.to_vec()), data)?.grad;
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = spec.log_posterior(&ParamVector(xp.clone()), data)?.logp;
        xp[i] = x[i] - h;
        let dn = spec.log_posterior(&ParamVector(xp.clone()), data)?.logp;
        xp[i] = x[i];
        worst = worst.max(relative_error(g[i], (up - dn) / (2.0 * h)));
    }
    Ok(worst)
}

/// The five variants checked by the gradient suite, labelled.
fn gradient_variants(j: usize, cut: usize) -> Vec<(&'static str, ModelVariant)> {
    vec![
        ("sep-logistic", ModelVariant::SepLogistic { cutpoint: cut }),
        ("po", ModelVariant::Po),
        ("ppo-u", ModelVariant::PpoUnconstrained),
        ("cppo-linear", ModelVariant::cppo_linear(j)),
        ("cppo-last", ModelVariant::cppo_last_diverge(j)),
    ]
}

/// Random point away from the ordering boundary: arm-1 cumulative logits
/// separated by at least 0.1 so finite differences stay accurate.
fn random_point<R: Rng>(spec: &ModelSpec, rng: &mut R) -> Vec<f64> {
    loop {
        let mut x: Vec<f64> = (0..spec.n_baseline()).map(|_| rng.random_range(-1.5..1.5)).collect();
        for i in 0..spec.n_effects() {
            let half = if i == 0 { 1.0 } else { 0.15 };
            x.push(rng.random_range(-half..half));
        }
        let eta = spec.cumlogits_for_arm(&ParamVector(x.clone()), 1).expect("length matches");
        let alpha = spec.baseline_cumlogits(&x);
        let gaps_ok = |e: &[f64]| e.windows(2).all(|w| w[0] - w[1] > 0.1);
        if gaps_ok(&eta.0) && gaps_ok(&alpha.0) {
            return x;
        }
    }
}

/// `n_points` random (parameter, data) pairs per model variant.
pub fn gradient_suite(n_points: usize, seed: u64) -> SuiteReport {
    let mut rep = SuiteReport::new("gradients");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<&str> = gradient_variants(3, 2).iter().map(|(n, _)| *n).collect();
    for (v, name) in names.iter().enumerate() {
        let mut worst: f64 = 0.0;
        let mut failure = None;
        for _ in 0..n_points {
            let j = rng.random_range(3..=11);
            let cut = rng.random_range(2..=j);
            let variant = gradient_variants(j, cut).swap_remove(v).1;
            let spec = ModelSpec::new(variant, j, &PriorConfig { sd_effect: 2.0, sd_increment: 1.0 }).expect("valid spec");
            let jd = spec.data_j();
            let arm = |rng: &mut ChaCha8Rng| (0..jd).map(|_| rng.random_range(0..40u64)).collect::<Vec<_>>();
            let data = OrdinalCounts::with_empty_arms(arm(&mut rng), arm(&mut rng)).expect("valid counts");
            let x = random_point(&spec, &mut rng);
            match max_fd_error(&spec, &data, &x, FD_STEP) {
                Ok(e) => worst = worst.max(e),
                Err(e) => failure = Some(e.to_string()),
            }
        }
        let passed = failure.is_none() && worst < FD_TOLERANCE;
        let detail = failure.unwrap_or_else(|| format!("{n_points} points, max relative error {worst:.3e} (limit {FD_TOLERANCE:e})"));
        rep.push(*name, passed, detail);
    }
    rep
}

// ---------------------------------------------------------------------------
// Dense-grid posterior for the three-category PO model

/// Log posterior of the three-category PO model written directly in
/// `(alpha_2, alpha_3, beta)`: flat Dirichlet on the control probabilities
/// (uniform on the ordered pair of upper tails, giving a logistic-density
/// factor per intercept) and a normal prior on `beta`.
fn po3_log_density(a2: f64, a3: f64, b: f64, data: &OrdinalCounts, sd: f64) -> f64 {
    if a2 <= a3 {
        return f64::NEG_INFINITY;
    }
    let mut lp = log_sigmoid(a2) + log_sigmoid(-a2) + log_sigmoid(a3) + log_sigmoid(-a3);
    lp += -0.5 * (b / sd).powi(2);
    for (arm, shift) in [(0, 0.0), (1, b)] {
        let s2 = sigmoid(a2 + shift);
        let s3 = sigmoid(a3 + shift);
        let p = [1.0 - s2, s2 - s3, s3];
        for (n, p) in data.arm(arm).iter().zip(p) {
            if *n > 0 {
                lp += *n as f64 * p.ln();
            }
        }
    }
    lp
}

fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Marginal densities (unnormalized) of the three coordinates on a grid.
fn grid_marginals(box_: [(f64, f64); 3], n: usize, data: &OrdinalCounts, sd: f64) -> ([Vec<f64>; 3], [Vec<f64>; 3]) {
    let axes = [axis(box_[0].0, box_[0].1, n), axis(box_[1].0, box_[1].1, n), axis(box_[2].0, box_[2].1, n)];
    // Log densities first to find a stabilizing maximum.
    let mut logd = vec![0.0; n * n * n];
    let mut max = f64::NEG_INFINITY;
    for (i, a2) in axes[0].iter().enumerate() {
        for (k, a3) in axes[1].iter().enumerate() {
            for (l, b) in axes[2].iter().enumerate() {
                let v = po3_log_density(*a2, *a3, *b, data, sd);
                logd[(i * n + k) * n + l] = v;
                max = max.max(v);
            }
        }
    }
    // Trapezoid weights along every axis.
    let w = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
    let mut marg = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        for k in 0..n {
            for l in 0..n {
                let d = (logd[(i * n + k) * n + l] - max).exp();
                marg[0][i] += d * w(k) * w(l);
                marg[1][k] += d * w(i) * w(l);
                marg[2][l] += d * w(i) * w(k);
            }
        }
    }
    (axes, marg)
}

fn marginal_moments(x: &[f64], f: &[f64]) -> (f64, f64) {
    let tot: f64 = f.iter().sum();
    let m = x.iter().zip(f).map(|(x, f)| x * f).sum::<f64>() / tot;
    let v = x.iter().zip(f).map(|(x, f)| (x - m).powi(2) * f).sum::<f64>() / tot;
    (m, v.sqrt())
}

/// Median of a gridded density via the trapezoid CDF and linear
/// interpolation.
fn marginal_median(x: &[f64], f: &[f64]) -> f64 {
    let mut cdf = vec![0.0; x.len()];
    for i in 1..x.len() {
        cdf[i] = cdf[i - 1] + 0.5 * (f[i] + f[i - 1]) * (x[i] - x[i - 1]);
    }
    let half = 0.5 * cdf[x.len() - 1];
    let i = cdf.iter().position(|&c| c >= half).expect("cdf reaches its total");
    if i == 0 {
        return x[0];
    }
    x[i - 1] + (half - cdf[i - 1]) / (cdf[i] - cdf[i - 1]) * (x[i] - x[i - 1])
}

/// Posterior medians of `(alpha_2, alpha_3, beta)` for three-category PO
/// data by dense-grid integration: a coarse pass locates the posterior, then
/// an `n^3` grid spans its mean +- 6 SD per axis.
pub fn grid_posterior_medians(data: &OrdinalCounts, sd_effect: f64, n: usize) -> [f64; 3] {
    assert_eq!(data.j(), 3, "grid oracle is for three categories");
    let mut box_ = [(-8.0, 8.0), (-8.0, 8.0), (-6.0, 6.0)];
    for _ in 0..2 {
        let (axes, marg) = grid_marginals(box_, 61, data, sd_effect);
        for d in 0..3 {
            let (m, s) = marginal_moments(&axes[d], &marg[d]);
            box_[d] = (m - 6.0 * s, m + 6.0 * s);
        }
    }
    let (axes, marg) = grid_marginals(box_, n, data, sd_effect);
    [marginal_median(&axes[0], &marg[0]), marginal_median(&axes[1], &marg[1]), marginal_median(&axes[2], &marg[2])]
}

/// The seeded three-category dataset used by the oracle check (n = 200).
pub fn oracle_dataset() -> OrdinalCounts {
    let pi0 = discretize_beta(ControlShape::Symmetric, 3);
    let tp = crate::dgm::TruePair::from_shift(&pi0, vec![1.5f64.ln(); 2]).expect("valid shift");
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    crate::dgm::sample_trial(&tp, 200, &mut rng).expect("sampled trial")
}

/// NUTS medians of `(alpha_2, alpha_3, beta)` for the PO model.
pub fn nuts_po3_medians(data: &OrdinalCounts, cfg: &SamplerConfig) -> Result<[f64; 3]> {
    let spec = ModelSpec::po(3);
    let fit = fit_spec(&spec, data, cfg)?;
    let mut cols = [Vec::new(), Vec::new(), Vec::new()];
    for ch in &fit.chains {
        for d in &ch.draws {
            let a = spec.baseline_cumlogits(d);
            cols[0].push(a.0[0]);
            cols[1].push(a.0[1]);
            cols[2].push(d[2]);
        }
    }
    Ok([quantile(&cols[0], 0.5), quantile(&cols[1], 0.5), quantile(&cols[2], 0.5)])
}

pub const ORACLE_TOLERANCE: f64 = 0.02;

pub fn oracle_suite(cfg: &SamplerConfig) -> SuiteReport {
    let mut rep = SuiteReport::new("oracle");
    let data = oracle_dataset();
    let grid = grid_posterior_medians(&data, PriorConfig::default().sd_effect, 201);
    match nuts_po3_medians(&data, cfg) {
        Ok(nuts) => {
            for (i, name) in ["alpha_2", "alpha_3", "beta"].iter().enumerate() {
                let diff = (nuts[i] - grid[i]).abs();
                rep.push(
                    format!("median {name}"),
                    diff < ORACLE_TOLERANCE,
                    format!("nuts {:.4} grid {:.4} |diff| {diff:.4} (limit {ORACLE_TOLERANCE})", nuts[i], grid[i]),
                );
            }
        }
        Err(e) => rep.push("nuts fit", false, e.to_string()),
    }
    rep
}

// ---------------------------------------------------------------------------
// Analytic sampler targets

/// Zero-mean Gaussian with a given precision matrix.
pub struct Gaussian {
    pub precision: Vec<Vec<f64>>,
}

impl Gaussian {
    pub fn standard(dim: usize) -> Self {
        Self { precision: (0..dim).map(|i| (0..dim).map(|k| f64::from(u8::from(i == k))).collect()).collect() }
    }

    /// Two coordinates with unit variances and correlation `rho`.
    pub fn correlated(rho: f64) -> Self {
        let det = 1.0 - rho * rho;
        Self { precision: vec![vec![1.0 / det, -rho / det], vec![-rho / det, 1.0 / det]] }
    }
}

impl LogDensity for Gaussian {
    fn dim(&self) -> usize {
        self.precision.len()
    }

    fn log_density(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let mut lp = 0.0;
        for (i, row) in self.precision.iter().enumerate() {
            let px: f64 = row.iter().zip(x).map(|(p, x)| p * x).sum();
            grad[i] = -px;
            lp -= 0.5 * x[i] * px;
        }
        lp
    }
}

/// Kolmogorov-Smirnov statistic of `x` against the standard normal.
pub fn ks_statistic_normal(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let norm = statrs::distribution::Normal::standard();
    use statrs::distribution::ContinuousCDF;
    s.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = norm.cdf(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS critical value at alpha = 0.001.
pub fn ks_critical_001(n: usize) -> f64 {
    1.949 / (n as f64).sqrt()
}

fn moment_checks(rep: &mut SuiteReport, label: &str, target: &Gaussian, cfg: &SamplerConfig, ks: bool) {
    let dim = target.dim();
    let inits: Vec<Vec<f64>> = (0..cfg.chains)
        .map(|c| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed ^ (c as u64 + 1));
            (0..dim).map(|_| r.random_range(-2.0..2.0)).collect()
        })
        .collect();
    let chains = match run_chains(target, &inits, cfg) {
        Ok(c) => c,
        Err(e) => return rep.push(label, false, e.to_string()),
    };
    let div: usize = chains.iter().map(|c| c.n_divergent()).sum();
    rep.push(format!("{label} divergences"), div == 0, format!("{div} divergent transitions"));
    for i in 0..dim {
        let per_chain: Vec<Vec<f64>> = chains.iter().map(|c| c.column(i)).collect();
        let pooled = per_chain.concat();
        let n = pooled.len() as f64;
        let mean = pooled.iter().sum::<f64>() / n;
        let var = pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let mcse = (var / ess_bulk(&per_chain)).sqrt();
        rep.push(
            format!("{label} mean[{i}]"),
            mean.abs() < 3.0 * mcse,
            format!("{mean:.4} (3 MCSE = {:.4})", 3.0 * mcse),
        );
        rep.push(format!("{label} var[{i}]"), (var - 1.0).abs() < 0.05, format!("{var:.4}"));
        if ks {
            let d = ks_statistic_normal(&pooled);
            let crit = ks_critical_001(pooled.len());
            rep.push(format!("{label} KS[{i}]"), d < crit, format!("D = {d:.4} (critical {crit:.4})"));
        }
    }
}

/// Standard 5-dim normal and a correlated (rho = 0.9) 2-dim normal.
pub fn sampler_suite(cfg: &SamplerConfig) -> SuiteReport {
    let mut rep = SuiteReport::new("sampler");
    moment_checks(&mut rep, "std-normal-5d", &Gaussian::standard(5), cfg, true);
    moment_checks(&mut rep, "corr-normal-2d", &Gaussian::correlated(0.9), cfg, false);
    rep
}

// ---------------------------------------------------------------------------
// Data generation identities

pub fn dgm_suite() -> SuiteReport {
    let mut rep = SuiteReport::new("dgm");
    let mut worst: f64 = 0.0;
    for j in 2..=11 {
        let p = discretize_beta(ControlShape::Custom { a: 1.0, b: 1.0 }, j);
        worst = p.probs().iter().map(|v| (v - 1.0 / j as f64).abs()).fold(worst, f64::max);
    }
    rep.push("Beta(1,1) uniform", worst <= 1e-15, format!("max deviation {worst:e}"));

    let mut worst: f64 = 0.0;
    for j in [3, 7, 11] {
        let p = discretize_beta(ControlShape::Symmetric, j);
        let pr = p.probs();
        worst = (0..j).map(|m| (pr[m] - pr[j - 1 - m]).abs()).fold(worst, f64::max);
    }
    rep.push("Beta(1.8,1.8) symmetric", worst <= 1e-12, format!("max asymmetry {worst:e}"));

    let pi0 = discretize_beta(ControlShape::Symmetric, 7);
    let s2 = gen_scenario2(&pi0, 0.8f64.ln(), 0.06).map(|t| t.theta_true);
    let expect: Vec<f64> = (2..=7).map(|k| 0.8f64.ln() + 0.06 * (k - 2) as f64).collect();
    rep.push("scenario 2 theta", s2.as_ref().is_ok_and(|t| *t == expect), format!("{s2:?}"));

    let pi0 = discretize_beta(ControlShape::Skewed, 11);
    let s3 = gen_scenario3(&pi0, 1.5f64.ln()).map(|t| t.theta_true);
    let ok = s3.as_ref().is_ok_and(|t| t[..9].iter().all(|&v| v == 0.0) && t[9] == 1.5f64.ln());
    rep.push("scenario 3 theta", ok, format!("{s3:?}"));

    let mut r = ChaCha8Rng::seed_from_u64(1);
    let s1 = crate::dgm::gen_scenario1(&pi0, 1.5f64.ln(), 0.0, &mut r).map(|t| t.theta_true);
    rep.push(
        "scenario 1 sigma=0 theta",
        s1.as_ref().is_ok_and(|t| t.iter().all(|&v| v == 1.5f64.ln())),
        format!("{s1:?}"),
    );
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(1e-9, 2e-9), 1e-9);
        assert!((relative_error(100.0, 101.0) - 1.0 / 101.0).abs() < 1e-15);
    }

    #[test]
    fn gradients_small() {
        let r = gradient_suite(10, 3);
        assert!(r.passed(), "{r}");
        assert_eq!(r.checks.len(), 5);
    }

    #[test]
    fn dgm_identities() {
        let r = dgm_suite();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn grid_density_matches_model_density() {
        // The oracle's density and the model's log posterior differ only by
        // a constant and the change of variables to the sampler's coordinates.
        let data = oracle_dataset();
        let spec = ModelSpec::po(3);
        let pts = [[0.3, -0.2, 0.4], [-0.5, 0.1, -0.3], [1.0, 0.7, 0.0]];
        let mut diffs = Vec::new();
        for x in pts {
            let a = spec.baseline_cumlogits(&x);
            let lp_model = spec.log_posterior(&ParamVector(x.to_vec()), &data).unwrap().logp;
            let lp_grid = po3_log_density(a.0[0], a.0[1], x[2], &data, 100.0);
            // Jacobian of (u1, u2) -> (alpha_2, alpha_3), by finite differences.
            let h = 1e-6;
            let mut jac = [[0.0; 2]; 2];
            for c in 0..2 {
                let mut xp = x;
                xp[c] += h;
                let mut xm = x;
                xm[c] -= h;
                let ap = spec.baseline_cumlogits(&xp);
                let am = spec.baseline_cumlogits(&xm);
                for r in 0..2 {
                    jac[r][c] = (ap.0[r] - am.0[r]) / (2.0 * h);
                }
            }
            let det = (jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0]).abs();
            diffs.push(lp_model - (lp_grid + det.ln()));
        }
        assert!((diffs[0] - diffs[1]).abs() < 1e-6 && (diffs[0] - diffs[2]).abs() < 1e-6, "{diffs:?}");
    }

    #[test]
    fn grid_median_of_known_density() {
        let x = axis(-5.0, 7.0, 2001);
        let f: Vec<f64> = x.iter().map(|v| (-0.5 * (v - 1.0f64).powi(2)).exp()).collect();
        assert!((marginal_median(&x, &f) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ks_detects_shift() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..5000).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        assert!(ks_statistic_normal(&x) < ks_critical_001(5000));
        let y: Vec<f64> = x.iter().map(|v| v + 0.2).collect();
        assert!(ks_statistic_normal(&y) > ks_critical_001(5000));
    }
}
