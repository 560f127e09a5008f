//! Convergence diagnostics (rank-normalized split R-hat, bulk and tail ESS)
//! and posterior summaries.
//!
//! All functions take draws as `chains[chain][draw]`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// R-hat threshold for the converged flag.
pub const RHAT_THRESHOLD: f64 = 1.01;
/// Required ESS per chain.
pub const ESS_PER_CHAIN: f64 = 100.0;

/// Median and equal-tailed 95% interval of one quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub median: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl PosteriorSummary {
    pub fn covers(&self, x: f64) -> bool {
        self.ci_low <= x && x <= self.ci_high
    }
}

/// Per-quantity diagnostics of one model fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsBundle {
    pub rhat: Vec<f64>,
    pub ess_bulk: Vec<f64>,
    pub ess_tail: Vec<f64>,
    pub n_divergent: usize,
    pub max_treedepth_hits: usize,
    pub chains: usize,
    pub converged: bool,
}

impl DiagnosticsBundle {
    /// Diagnostics for `quantities[q][chain][draw]`.
    pub fn compute(quantities: &[Vec<Vec<f64>>], n_divergent: usize, max_treedepth_hits: usize) -> Self {
        let chains = quantities.first().map_or(0, Vec::len);
        let rhat: Vec<f64> = quantities.iter().map(|q| split_rhat(q)).collect();
        let ess_bulk: Vec<f64> = quantities.iter().map(|q| ess_bulk(q)).collect();
        let ess_tail: Vec<f64> = quantities.iter().map(|q| ess_tail(q)).collect();
        let mut b = Self { rhat, ess_bulk, ess_tail, n_divergent, max_treedepth_hits, chains, converged: false };
        b.converged = b.rhat_ok() && b.ess_ok() && n_divergent == 0;
        b
    }

    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_ess_bulk(&self) -> f64 {
        self.ess_bulk.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn min_ess_tail(&self) -> f64 {
        self.ess_tail.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn rhat_ok(&self) -> bool {
        self.rhat.iter().all(|&r| r < RHAT_THRESHOLD)
    }

    pub fn ess_ok(&self) -> bool {
        let need = ESS_PER_CHAIN * self.chains as f64;
        self.ess_bulk.iter().chain(&self.ess_tail).all(|&e| e >= need)
    }
}

/// Quantile with linear interpolation between order statistics
/// (`h = (n - 1) p`). `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

fn sorted_copy(x: &[f64]) -> Vec<f64> {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

pub fn quantile(x: &[f64], p: f64) -> f64 {
    quantile_sorted(&sorted_copy(x), p)
}

/// Median and 2.5% / 97.5% quantiles.
pub fn summarize(draws: &[f64]) -> PosteriorSummary {
    let s = sorted_copy(draws);
    PosteriorSummary {
        median: quantile_sorted(&s, 0.5),
        ci_low: quantile_sorted(&s, 0.025),
        ci_high: quantile_sorted(&s, 0.975),
    }
}

/// Split each chain into halves (the middle draw of odd-length chains is
/// dropped).
pub fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Replace pooled draws by normal scores of their average ranks.
pub fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut idx: Vec<(usize, usize)> = Vec::new();
    let mut vals = Vec::new();
    for (c, ch) in chains.iter().enumerate() {
        for (i, &v) in ch.iter().enumerate() {
            idx.push((c, i));
            vals.push(v);
        }
    }
    let s = vals.len();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && vals[order[j + 1]] == vals[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    let norm = Normal::standard();
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    for (k, &(c, i)) in idx.iter().enumerate() {
        out[c][i] = norm.inverse_cdf((ranks[k] - 0.375) / (s as f64 + 0.25));
    }
    out
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn is_constant(chains: &[Vec<f64>]) -> bool {
    let first = chains.iter().flatten().next();
    first.is_none_or(|f| chains.iter().flatten().all(|v| v == f))
}

fn total_draws(chains: &[Vec<f64>]) -> f64 {
    chains.iter().map(Vec::len).sum::<usize>() as f64
}

/// Classic potential scale reduction on the given chains.
pub fn rhat_basic(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let var_between = n * sample_var(&means);
    let var_within = mean(&chains.iter().map(|c| sample_var(c)).collect::<Vec<_>>());
    ((var_between / var_within + n - 1.0) / n).sqrt()
}

/// Rank-normalized split R-hat; exactly 1 for constant draws. Sampling noise
/// can push the raw ratio slightly below 1; the result is floored at 1.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    if is_constant(chains) {
        return 1.0;
    }
    let r = rhat_basic(&rank_normalize(&split_chains(chains)));
    if r.is_nan() {
        r
    } else {
        r.max(1.0)
    }
}

/// Biased autocovariance of a centred series at `lag`.
fn autocov(centred: &[f64], lag: usize) -> f64 {
    let n = centred.len();
    centred[..n - lag].iter().zip(&centred[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64
}

/// Multi-chain ESS with Geyer's initial positive and monotone sequence
/// truncation. Chains must have equal length.
pub fn ess_basic(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let total = (m * n) as f64;
    if n < 3 {
        return f64::NAN;
    }
    let centred: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| {
            let mu = mean(c);
            c.iter().map(|v| v - mu).collect()
        })
        .collect();
    let acov_mean = |lag: usize| centred.iter().map(|c| autocov(c, lag)).sum::<f64>() / m as f64;

    let nf = n as f64;
    let mean_var = acov_mean(0) * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += sample_var(&chains.iter().map(|c| mean(c)).collect::<Vec<_>>());
    }
    let rho = |lag: usize| 1.0 - (mean_var - acov_mean(lag)) / var_plus;

    let mut rho_hat = vec![0.0; n];
    let mut t = 0;
    let mut even = 1.0;
    rho_hat[0] = even;
    let mut odd = rho(1);
    rho_hat[1] = odd;
    while t + 5 < n && !(even + odd).is_nan() && even + odd > 0.0 {
        t += 2;
        even = rho(t);
        odd = rho(t + 1);
        if even + odd >= 0.0 {
            rho_hat[t] = even;
            rho_hat[t + 1] = odd;
        }
    }
    let max_t = t;
    if even > 0.0 {
        rho_hat[max_t] = even;
    }
    // Enforce a monotone sequence of paired sums.
    let mut t = 0;
    while t + 4 <= max_t {
        t += 2;
        if rho_hat[t] + rho_hat[t + 1] > rho_hat[t - 2] + rho_hat[t - 1] {
            rho_hat[t] = (rho_hat[t - 2] + rho_hat[t - 1]) / 2.0;
            rho_hat[t + 1] = rho_hat[t];
        }
    }
    let mut tau = -1.0 + 2.0 * rho_hat[..max_t].iter().sum::<f64>() + rho_hat[max_t];
    tau = tau.max(1.0 / total.log10());
    total / tau
}

/// Bulk ESS: rank-normalized split chains. Constant draws give the total
/// draw count.
pub fn ess_bulk(chains: &[Vec<f64>]) -> f64 {
    if is_constant(chains) {
        return total_draws(chains);
    }
    ess_basic(&rank_normalize(&split_chains(chains)))
}

/// ESS of the indicator `x <= quantile(p)` on split chains.
pub fn ess_quantile(chains: &[Vec<f64>], p: f64) -> f64 {
    let pooled: Vec<f64> = chains.concat();
    let q = quantile(&pooled, p);
    let ind: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|&v| f64::from(u8::from(v <= q))).collect()).collect();
    if is_constant(&ind) {
        return total_draws(chains);
    }
    ess_basic(&split_chains(&ind))
}

/// Tail ESS: the smaller of the 5% and 95% quantile ESS.
pub fn ess_tail(chains: &[Vec<f64>]) -> f64 {
    ess_quantile(chains, 0.05).min(ess_quantile(chains, 0.95))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn iid(m: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..m).map(|_| (0..n).map(|_| r.sample(StandardNormal)).collect()).collect()
    }

    fn ar1(m: usize, n: usize, phi: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let sd = (1.0 - phi * phi).sqrt();
        (0..m)
            .map(|_| {
                let mut x: f64 = r.sample(StandardNormal);
                (0..n)
                    .map(|_| {
                        x = phi * x + sd * r.sample::<f64, _>(StandardNormal);
                        x
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn summary_examples() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(s.median, 3.0);
        assert!((s.ci_low - 1.1).abs() < 1e-12 && (s.ci_high - 4.9).abs() < 1e-12);
        let d: Vec<f64> = iid(1, 15000, 3).concat();
        let s = summarize(&d);
        assert!((s.ci_low + 1.96).abs() < 0.06 && (s.ci_high - 1.96).abs() < 0.06, "{s:?}");
        assert!(s.ci_low <= s.median && s.median <= s.ci_high);
    }

    #[test]
    fn symmetric_draws_have_small_median() {
        let d: Vec<f64> = iid(1, 4000, 5).concat();
        let sym: Vec<f64> = d.iter().flat_map(|&v| [v, -v]).collect();
        assert!(summarize(&sym).median.abs() < 1e-12);
        // Median MCSE for N(0,1): sqrt(pi/2)/sqrt(n).
        let s = summarize(&d);
        assert!(s.median.abs() < 3.0 * (std::f64::consts::PI / 2.0).sqrt() / (d.len() as f64).sqrt());
    }

    #[test]
    fn constant_conventions() {
        let c = vec![vec![2.0; 100]; 4];
        assert_eq!(split_rhat(&c), 1.0);
        assert_eq!(ess_bulk(&c), 400.0);
        assert_eq!(ess_tail(&c), 400.0);
    }

    #[test]
    fn rhat_iid_and_shifted() {
        let passes = (0..100).filter(|&s| split_rhat(&iid(4, 3750, s)) < 1.01).count();
        assert!(passes >= 99, "{passes}");
        for s in 0..10 {
            let mut c = iid(2, 1000, 100 + s);
            c[1].iter_mut().for_each(|v| *v += 5.0);
            assert!(split_rhat(&c) > 1.5);
        }
    }

    #[test]
    fn ess_iid_within_15_percent() {
        let passes = (0..100)
            .filter(|&s| {
                let c = iid(4, 1000, 1000 + s);
                (ess_bulk(&c) / 4000.0 - 1.0).abs() < 0.15
            })
            .count();
        assert!(passes >= 95, "{passes}");
    }

    #[test]
    fn ess_ar1_matches_closed_form() {
        let phi = 0.9;
        let n = 4 * 5000;
        let expect = n as f64 * (1.0 - phi) / (1.0 + phi);
        for s in 0..5 {
            let c = ar1(4, 5000, phi, 50 + s);
            let e = ess_bulk(&c);
            assert!((e / expect - 1.0).abs() < 0.25, "{e} vs {expect}");
            let et = ess_tail(&c);
            assert!(et > 0.0 && et < n as f64);
        }
    }

    #[test]
    fn monotone_transform_invariance() {
        let c = ar1(4, 500, 0.5, 9);
        let e: Vec<Vec<f64>> = c.iter().map(|ch| ch.iter().map(|v| v.exp()).collect()).collect();
        assert!((split_rhat(&c) - split_rhat(&e)).abs() < 1e-12);
        assert!((ess_bulk(&c) - ess_bulk(&e)).abs() < 1e-9);
        let a: Vec<Vec<f64>> = c.iter().map(|ch| ch.iter().map(|v| 3.0 + 2.5 * v).collect()).collect();
        assert!((ess_bulk(&c) - ess_bulk(&a)).abs() < 1e-9);
        assert!((ess_tail(&c) - ess_tail(&a)).abs() < 1e-9);
    }

    #[test]
    fn bundle_flags() {
        let q = vec![iid(4, 1000, 1), iid(4, 1000, 2)];
        let b = DiagnosticsBundle::compute(&q, 0, 0);
        assert!(b.converged, "{b:?}");
        assert!(b.rhat.iter().all(|&r| r >= 1.0 - 1e-8));
        let b = DiagnosticsBundle::compute(&q, 1, 0);
        assert!(!b.converged);
        let b = DiagnosticsBundle::compute(&[ar1(4, 200, 0.99, 3)], 0, 0);
        assert!(!b.converged);
    }

    proptest! {
        #[test]
        fn summarize_is_equivariant(xs in prop::collection::vec(-50.0f64..50.0, 2..200), a in -10.0f64..10.0, b in 0.01f64..10.0) {
            let s = summarize(&xs);
            let t = summarize(&xs.iter().map(|x| a + b * x).collect::<Vec<_>>());
            let tol = |v: f64| 1e-12 * (1.0 + v.abs()) * 64.0;
            prop_assert!((t.median - (a + b * s.median)).abs() <= tol(t.median));
            prop_assert!((t.ci_low - (a + b * s.ci_low)).abs() <= tol(t.ci_low));
            prop_assert!((t.ci_high - (a + b * s.ci_high)).abs() <= tol(t.ci_high));
            prop_assert!(s.ci_low <= s.median && s.median <= s.ci_high);
        }
    }
}
