//! Data-generating mechanisms: discretised Beta control distributions, the
//! three proportionality scenarios and multinomial trial sampling.

use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::ordcore::{cumlogits_from_probs, probs_from_cumlogits, CumulativeLogits, OrdinalCounts, Simplex};
use crate::{Error, Result};

/// Whole-vector rejection cap for scenario 1.
pub const REJECTION_CAP: usize = 1_000_000;

/// Beta shape of the latent control-arm distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlShape {
    /// Beta(1.8, 1.8): symmetric, mass in the middle categories.
    Symmetric,
    /// Beta(1.3, 0.9): mass shifted to the higher categories.
    Skewed,
    Custom { a: f64, b: f64 },
}

impl ControlShape {
    pub fn params(&self) -> (f64, f64) {
        match *self {
            ControlShape::Symmetric => (1.8, 1.8),
            ControlShape::Skewed => (1.3, 0.9),
            ControlShape::Custom { a, b } => (a, b),
        }
    }

    pub fn label(&self) -> String {
        match self {
            ControlShape::Symmetric => "sym".into(),
            ControlShape::Skewed => "skew".into(),
            ControlShape::Custom { a, b } => format!("beta{a}-{b}"),
        }
    }
}

/// How treatment-arm cut-point log-ORs depart from proportional odds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropScenario {
    /// Random variation around a common log-OR; `sigma = 0` is exact PO.
    S1 { mean_log_or: f64, sigma: f64 },
    /// Linear trend: `theta_k = zeta + gamma (k - 2)`.
    S2 { zeta: f64, gamma: f64 },
    /// Null at every cut-point except the highest.
    S3 { top_log_or: f64 },
}

impl PropScenario {
    /// The nine scenario-1 configurations (3 effect sizes x 3 departures).
    pub fn scenario1_set() -> Vec<PropScenario> {
        let mut out = Vec::with_capacity(9);
        for or in [1.0f64, 1.10, 1.50] {
            for sigma in [0.0, 0.05, 0.10] {
                out.push(PropScenario::S1 { mean_log_or: or.ln(), sigma });
            }
        }
        out
    }

    pub fn scenario2_default() -> PropScenario {
        PropScenario::S2 { zeta: 0.8f64.ln(), gamma: 0.06 }
    }

    pub fn scenario3_set() -> Vec<PropScenario> {
        vec![PropScenario::S3 { top_log_or: 1.10f64.ln() }, PropScenario::S3 { top_log_or: 1.50f64.ln() }]
    }

    /// All twelve proportionality configurations.
    pub fn all() -> Vec<PropScenario> {
        let mut v = Self::scenario1_set();
        v.push(Self::scenario2_default());
        v.extend(Self::scenario3_set());
        v
    }

    pub fn label(&self) -> String {
        match *self {
            PropScenario::S1 { mean_log_or, sigma } => {
                format!("s1-or{:.2}-sd{:.2}", mean_log_or.exp(), sigma)
            }
            PropScenario::S2 { zeta, gamma } => format!("s2-zeta{:.2}-g{:.2}", zeta.exp(), gamma),
            PropScenario::S3 { top_log_or } => format!("s3-top{:.2}", top_log_or.exp()),
        }
    }

    /// Nominal cut-point log-ORs (the mean vector for scenario 1).
    pub fn nominal_theta(&self, j: usize) -> Vec<f64> {
        match *self {
            PropScenario::S1 { mean_log_or, .. } => vec![mean_log_or; j - 1],
            PropScenario::S2 { zeta, gamma } => (2..=j).map(|k| zeta + gamma * (k - 2) as f64).collect(),
            PropScenario::S3 { top_log_or } => {
                let mut t = vec![0.0; j - 1];
                t[j - 2] = top_log_or;
                t
            }
        }
    }
}

/// Control and treatment distributions together with the cut-point log-ORs
/// used as evaluation truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruePair {
    pub pi0: Simplex,
    pub pi1: Simplex,
    pub theta_true: Vec<f64>,
}

impl TruePair {
    /// Builds `pi1` from `pi0` shifted by `theta` on the cumulative-logit scale.
    pub fn from_shift(pi0: &Simplex, theta: Vec<f64>) -> Result<Self> {
        let alpha = cumlogits_from_probs(pi0)?;
        if theta.len() != alpha.0.len() {
            return Err(Error::ShapeMismatch(format!(
                "theta has {} entries, expected {}",
                theta.len(),
                alpha.0.len()
            )));
        }
        let eta = CumulativeLogits(alpha.0.iter().zip(&theta).map(|(a, t)| a + t).collect());
        if !eta.is_strictly_decreasing() {
            return Err(Error::InvalidScenario("treatment cumulative logits are not decreasing".into()));
        }
        let p = probs_from_cumlogits(&eta);
        if p.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::InvalidScenario("treatment probabilities are not all positive".into()));
        }
        let pi1 = Simplex::new(p).map_err(|e| Error::InvalidScenario(e.to_string()))?;
        Ok(TruePair { pi0: pi0.clone(), pi1, theta_true: theta })
    }
}

/// Discretises a Beta(a, b) density into `j` equal-width bins on (0, 1).
pub fn discretize_beta(shape: ControlShape, j: usize) -> Simplex {
    assert!(j >= 2, "need at least two categories");
    let (a, b) = shape.params();
    let cdf: Vec<f64> = (0..=j)
        .map(|k| match k {
            0 => 0.0,
            k if k == j => 1.0,
            k => statrs::function::beta::beta_reg(a, b, k as f64 / j as f64),
        })
        .collect();
    let probs = cdf.windows(2).map(|w| w[1] - w[0]).collect();
    Simplex::new(probs).expect("Beta CDF differences form a simplex")
}

/// One draw from Normal(mean, sd^2) truncated to (lower, upper) by inverse CDF.
pub fn truncnorm_sample<R: Rng + ?Sized>(mean: f64, sd: f64, lower: f64, upper: f64, rng: &mut R) -> Result<f64> {
    if !(lower < upper) || sd < 0.0 {
        return Err(Error::BoundsViolation(format!("need lower < upper and sd >= 0, got ({lower}, {upper}), sd {sd}")));
    }
    if sd == 0.0 {
        return if mean > lower && mean < upper {
            Ok(mean)
        } else {
            Err(Error::BoundsViolation(format!("sd = 0 and mean {mean} outside ({lower}, {upper})")))
        };
    }
    let std = Normal::standard();
    let mut a = (lower - mean) / sd;
    let mut b = (upper - mean) / sd;
    // Work in the lower tail, where the CDF keeps its precision.
    let flip = a > 0.0;
    if flip {
        (a, b) = (-b, -a);
    }
    let (fa, fb) = (std.cdf(a), std.cdf(b));
    let u: f64 = rng.random();
    let z = std.inverse_cdf(fa + u * (fb - fa)).clamp(a, b);
    let z = if flip { -z } else { z };
    Ok(mean + sd * z)
}

/// Scenario 1: cut-point log-ORs drawn i.i.d. Normal(mean, sigma^2), jointly
/// truncated to keep the treatment distribution valid (rejection on the
/// whole vector).
pub fn gen_scenario1<R: Rng + ?Sized>(pi0: &Simplex, mean_log_or: f64, sigma: f64, rng: &mut R) -> Result<TruePair> {
    let alpha = cumlogits_from_probs(pi0)?;
    let m = alpha.0.len();
    if sigma == 0.0 {
        return TruePair::from_shift(pi0, vec![mean_log_or; m]);
    }
    let mut theta = vec![0.0; m];
    for _ in 0..REJECTION_CAP {
        for t in theta.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *t = mean_log_or + sigma * z;
        }
        if let Ok(tp) = TruePair::from_shift(pi0, theta.clone()) {
            return Ok(tp);
        }
    }
    Err(Error::RejectionExhausted { attempts: REJECTION_CAP })
}

/// Scenario 2: `theta_k = zeta + gamma (k - 2)`.
pub fn gen_scenario2(pi0: &Simplex, zeta: f64, gamma: f64) -> Result<TruePair> {
    let theta = PropScenario::S2 { zeta, gamma }.nominal_theta(pi0.j());
    TruePair::from_shift(pi0, theta)
}

/// Scenario 3: zero log-OR below the top cut-point, `top_log_or` at it.
pub fn gen_scenario3(pi0: &Simplex, top_log_or: f64) -> Result<TruePair> {
    let theta = PropScenario::S3 { top_log_or }.nominal_theta(pi0.j());
    TruePair::from_shift(pi0, theta)
}

/// Dispatches on the scenario variant.
pub fn gen_true_pair<R: Rng + ?Sized>(pi0: &Simplex, prop: &PropScenario, rng: &mut R) -> Result<TruePair> {
    match *prop {
        PropScenario::S1 { mean_log_or, sigma } => gen_scenario1(pi0, mean_log_or, sigma, rng),
        PropScenario::S2 { zeta, gamma } => gen_scenario2(pi0, zeta, gamma),
        PropScenario::S3 { top_log_or } => gen_scenario3(pi0, top_log_or),
    }
}

/// Multinomial counts via sequential conditional binomials.
pub fn sample_multinomial<R: Rng + ?Sized>(n: u64, probs: &[f64], rng: &mut R) -> Vec<u64> {
    let mut out = vec![0; probs.len()];
    let mut left = n;
    let mut mass = 1.0;
    for (k, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if k == probs.len() - 1 {
            out[k] = left;
            break;
        }
        let q = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 0.0 };
        let c = Binomial::new(left, q).expect("probability in [0, 1]").sample(rng);
        out[k] = c;
        left -= c;
        mass -= p;
    }
    out
}

/// Simulates one two-arm trial: Bernoulli(0.5) allocation, then multinomial
/// outcomes per arm.
pub fn sample_trial<R: Rng + ?Sized>(tp: &TruePair, n_obs: u64, rng: &mut R) -> Result<OrdinalCounts> {
    if n_obs < 2 {
        return Err(Error::InvalidCounts(format!("n_obs must be >= 2, got {n_obs}")));
    }
    let n1 = Binomial::new(n_obs, 0.5).expect("valid binomial").sample(rng);
    let n0 = n_obs - n1;
    let c0 = sample_multinomial(n0, tp.pi0.probs(), rng);
    let c1 = sample_multinomial(n1, tp.pi1.probs(), rng);
    OrdinalCounts::with_empty_arms(c0, c1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Composite Simpson integral of the Beta(a, b) density over [lo, hi].
    fn simpson_beta_mass(a: f64, b: f64, lo: f64, hi: f64, n: usize) -> f64 {
        let lnb = statrs::function::gamma::ln_gamma(a) + statrs::function::gamma::ln_gamma(b)
            - statrs::function::gamma::ln_gamma(a + b);
        let f = |x: f64| {
            if x <= 0.0 || x >= 1.0 {
                // Integrable endpoint singularity for b < 1; nudge inside.
                let x = x.clamp(1e-12, 1.0 - 1e-12);
                ((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - lnb).exp()
            } else {
                ((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - lnb).exp()
            }
        };
        let h = (hi - lo) / n as f64;
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn beta_uniform_discretisation() {
        let s = discretize_beta(ControlShape::Custom { a: 1.0, b: 1.0 }, 4);
        for p in s.probs() {
            assert!((p - 0.25).abs() < 1e-15, "{p}");
        }
    }

    #[test]
    fn beta_symmetric_discretisation() {
        for j in [3, 7, 11, 29] {
            let s = discretize_beta(ControlShape::Symmetric, j);
            let p = s.probs();
            for k in 0..j {
                assert!((p[k] - p[j - 1 - k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn beta_skewed_matches_simpson_oracle() {
        let s = discretize_beta(ControlShape::Skewed, 3);
        // Frozen from the Simpson oracle (10^4 panels); the last bin carries an
        // integrable singularity, so it is checked by complement.
        let m1 = simpson_beta_mass(1.3, 0.9, 0.0, 1.0 / 3.0, 10_000);
        let m2 = simpson_beta_mass(1.3, 0.9, 1.0 / 3.0, 2.0 / 3.0, 10_000);
        let p = s.probs();
        assert!((p[0] - m1).abs() < 1e-6, "{} vs {m1}", p[0]);
        assert!((p[1] - m2).abs() < 1e-6, "{} vs {m2}", p[1]);
        assert!((p[2] - (1.0 - m1 - m2)).abs() < 1e-6);
        assert!(p[2] > p[1] && p[2] > p[0]);
    }

    #[test]
    fn scenario1_null_effect() {
        let pi0 = discretize_beta(ControlShape::Symmetric, 5);
        let tp = gen_scenario1(&pi0, 0.0, 0.0, &mut rng(1)).unwrap();
        assert_eq!(tp.theta_true, vec![0.0; 4]);
        for (a, b) in tp.pi0.probs().iter().zip(tp.pi1.probs()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn scenario1_po_composition() {
        let pi0 = Simplex::uniform(3);
        let tp = gen_scenario1(&pi0, 1.5f64.ln(), 0.0, &mut rng(1)).unwrap();
        assert_eq!(tp.theta_true, vec![1.5f64.ln(); 2]);
        let expect = probs_from_cumlogits(&CumulativeLogits(vec![
            crate::ordcore::logit(2.0 / 3.0) + 1.5f64.ln(),
            crate::ordcore::logit(1.0 / 3.0) + 1.5f64.ln(),
        ]));
        for (a, b) in tp.pi1.probs().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn scenario1_monte_carlo_moments() {
        let pi0 = discretize_beta(ControlShape::Symmetric, 7);
        let mut r = rng(11);
        let n = 10_000;
        let mean = 1.1f64.ln();
        let draws: Vec<Vec<f64>> =
            (0..n).map(|_| gen_scenario1(&pi0, mean, 0.10, &mut r).unwrap().theta_true).collect();
        for k in 0..6 {
            let xs: Vec<f64> = draws.iter().map(|t| t[k]).collect();
            let m = xs.iter().sum::<f64>() / n as f64;
            let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            assert!((sd - 0.10).abs() < 0.01, "k={k} sd={sd}");
            assert!((m - mean).abs() < 3.0 * sd / (n as f64).sqrt(), "k={k} mean={m}");
        }
    }

    #[test]
    fn scenario2_values() {
        let pi0 = discretize_beta(ControlShape::Symmetric, 7);
        let tp = gen_scenario2(&pi0, 0.8f64.ln(), 0.06).unwrap();
        assert!((tp.theta_true[0] - (-0.2231435513142097)).abs() < 1e-12);
        assert!((tp.theta_true[5] - (0.8f64.ln() + 0.30)).abs() < 1e-12);
        assert!((tp.theta_true[5] - 0.0768564).abs() < 1e-6);
        let a = cumlogits_from_probs(&tp.pi0).unwrap();
        let b = cumlogits_from_probs(&tp.pi1).unwrap();
        for k in 0..6 {
            assert!((b.0[k] - a.0[k]).abs() > 1e-6);
        }
    }

    #[test]
    fn scenario3_values() {
        let tp = gen_scenario3(&Simplex::uniform(3), 1.5f64.ln()).unwrap();
        assert_eq!(tp.theta_true, vec![0.0, 1.5f64.ln()]);
        let upper = tp.pi1.upper_tails();
        assert!((upper[0] - 2.0 / 3.0).abs() < 1e-14);
        let expect = crate::ordcore::sigmoid(crate::ordcore::logit(1.0 / 3.0) + 1.5f64.ln());
        assert!((upper[1] - expect).abs() < 1e-14);

        let tp = gen_scenario3(&discretize_beta(ControlShape::Skewed, 11), 1.1f64.ln()).unwrap();
        assert!(tp.theta_true[..9].iter().all(|&t| t == 0.0));
        assert_ne!(tp.theta_true[9], 0.0);

        let tp = gen_scenario3(&discretize_beta(ControlShape::Skewed, 11), 0.0).unwrap();
        for (a, b) in tp.pi0.probs().iter().zip(tp.pi1.probs()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn true_pair_consistency() {
        let pi0 = discretize_beta(ControlShape::Skewed, 11);
        let mut r = rng(3);
        for prop in PropScenario::all() {
            let tp = gen_true_pair(&pi0, &prop, &mut r).unwrap();
            let a = cumlogits_from_probs(&tp.pi0).unwrap();
            let b = cumlogits_from_probs(&tp.pi1).unwrap();
            for k in 0..10 {
                assert!((b.0[k] - a.0[k] - tp.theta_true[k]).abs() < 1e-10, "{prop:?}");
            }
        }
    }

    #[test]
    fn sample_trial_degenerate_and_totals() {
        let s = Simplex::new(vec![1.0, 0.0, 0.0]).unwrap();
        let tp = TruePair { pi0: s.clone(), pi1: s, theta_true: vec![0.0, 0.0] };
        let c = sample_trial(&tp, 50, &mut rng(5)).unwrap();
        assert_eq!(c.arm(0)[1..], [0, 0]);
        assert_eq!(c.arm(1)[1..], [0, 0]);
        assert_eq!(c.total(), 50);

        let pi0 = discretize_beta(ControlShape::Symmetric, 7);
        let tp = gen_scenario2(&pi0, 0.8f64.ln(), 0.06).unwrap();
        let c = sample_trial(&tp, 1500, &mut rng(6)).unwrap();
        assert_eq!(c.total(), 1500);
    }

    #[test]
    fn sample_trial_frequencies() {
        let pi0 = discretize_beta(ControlShape::Skewed, 5);
        let tp = gen_scenario3(&pi0, 1.5f64.ln()).unwrap();
        let mut r = rng(9);
        let reps = 10_000;
        let n_obs = 200;
        let mut freq = [vec![0u64; 5], vec![0u64; 5]];
        let mut arm_n = [0u64; 2];
        for _ in 0..reps {
            let c = sample_trial(&tp, n_obs, &mut r).unwrap();
            for arm in 0..2 {
                arm_n[arm] += c.arm_total(arm);
                for k in 0..5 {
                    freq[arm][k] += c.arm(arm)[k];
                }
            }
        }
        for (arm, pi) in [&tp.pi0, &tp.pi1].into_iter().enumerate() {
            let n = arm_n[arm] as f64;
            for k in 0..5 {
                let p = pi.probs()[k];
                let se = (p * (1.0 - p) / n).sqrt();
                let f = freq[arm][k] as f64 / n;
                assert!((f - p).abs() < 3.0 * se, "arm {arm} k {k}: {f} vs {p}");
            }
        }
        let share = arm_n[1] as f64 / (reps * n_obs) as f64;
        assert!((share - 0.5).abs() < 3.0 * (0.25 / (reps * n_obs) as f64).sqrt());
    }

    #[test]
    fn truncnorm_cases() {
        let mut r = rng(2);
        assert_eq!(truncnorm_sample(0.4, 0.0, f64::NEG_INFINITY, f64::INFINITY, &mut r).unwrap(), 0.4);
        assert!(matches!(truncnorm_sample(2.0, 0.0, 0.0, 1.0, &mut r), Err(Error::BoundsViolation(_))));
        assert!(truncnorm_sample(0.0, 1.0, 1.0, 0.0, &mut r).is_err());

        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| truncnorm_sample(0.0, 1.0, 0.0, f64::INFINITY, &mut r).unwrap()).collect();
        assert!(xs.iter().all(|&x| x >= 0.0));
        let m = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        let half_normal_mean = (2.0 / std::f64::consts::PI).sqrt();
        assert!((m - half_normal_mean).abs() < 3.0 * sd / (n as f64).sqrt(), "{m}");

        // Naive rejection oracle agrees with the closed form.
        let mut kept = Vec::new();
        while kept.len() < n {
            let z: f64 = r.sample(StandardNormal);
            if z > 0.0 {
                kept.push(z);
            }
        }
        let mr = kept.iter().sum::<f64>() / n as f64;
        assert!((mr - half_normal_mean).abs() < 3.0 * sd / (n as f64).sqrt());

        let xs: Vec<f64> = (0..n).map(|_| truncnorm_sample(0.0, 1.0, -0.5, 0.5, &mut r).unwrap()).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!(m.abs() < 3.0 * sd / (n as f64).sqrt());
        assert!(xs.iter().all(|&x| x > -0.5 && x < 0.5));

        // Far upper tail stays inside its bounds.
        let x = truncnorm_sample(0.0, 1.0, 8.0, 9.0, &mut r).unwrap();
        assert!((8.0..=9.0).contains(&x));
    }
}
