//! The five cumulative-logit analysis models: parameter layouts, priors, the
//! log posterior with its exact gradient, and cut-point log-OR extraction.
//!
//! Every model shares the same baseline block: `j - 1` unconstrained
//! coordinates mapped by centred stick-breaking onto the control-arm category
//! simplex. A flat Dirichlet prior on that simplex contributes exactly the
//! transform's log-Jacobian. Intercepts are `alpha_k = logit P(Y >= k | x = 0)`.
//!
//! Effect blocks:
//!
//! | variant    | effects                       | arm-1 offset at cut-point k |
//! |------------|-------------------------------|-----------------------------|
//! | SepLogistic| `theta`                       | `theta` (j = 2 data)        |
//! | PO         | `beta`                        | `beta`                      |
//! | PPO-U      | `zeta, gamma_3..gamma_j`      | `zeta + gamma_k`, gamma_2 = 0 |
//! | CPPO       | `zeta, gamma`                 | `zeta + Gamma_k gamma`      |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ordcore::{
    log1m_exp_neg, log_sigmoid, sigmoid, unconstrained_from_simplex, CumulativeLogits, OrdinalCounts, Simplex,
    StickBreaking,
};
use crate::sampler::LogDensity;
use crate::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Attempts allowed when jittered starting points have zero density.
pub const INIT_ATTEMPTS: usize = 100;

/// The five analysis approaches compared on every dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnalysisModel {
    #[serde(rename = "sep-logistic")]
    SepLogistic,
    #[serde(rename = "po")]
    Po,
    #[serde(rename = "ppo-u")]
    PpoU,
    #[serde(rename = "cppo-linear")]
    CppoLinear,
    #[serde(rename = "cppo-last")]
    CppoLast,
}

impl AnalysisModel {
    pub const ALL: [AnalysisModel; 5] = [
        AnalysisModel::SepLogistic,
        AnalysisModel::Po,
        AnalysisModel::PpoU,
        AnalysisModel::CppoLinear,
        AnalysisModel::CppoLast,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AnalysisModel::SepLogistic => "sep-logistic",
            AnalysisModel::Po => "po",
            AnalysisModel::PpoU => "ppo-u",
            AnalysisModel::CppoLinear => "cppo-linear",
            AnalysisModel::CppoLast => "cppo-last",
        }
    }

    /// Single-fit specs needed for this model on `j`-category data; separate
    /// logistic regression needs one fit per cut-point.
    pub fn specs(&self, j: usize, priors: &PriorConfig) -> Result<Vec<ModelSpec>> {
        Ok(match self {
            AnalysisModel::SepLogistic => {
                (2..=j).map(|k| ModelSpec::new(ModelVariant::SepLogistic { cutpoint: k }, j, priors)).collect::<Result<_>>()?
            }
            AnalysisModel::Po => vec![ModelSpec::new(ModelVariant::Po, j, priors)?],
            AnalysisModel::PpoU => vec![ModelSpec::new(ModelVariant::PpoUnconstrained, j, priors)?],
            AnalysisModel::CppoLinear => vec![ModelSpec::new(ModelVariant::cppo_linear(j), j, priors)?],
            AnalysisModel::CppoLast => vec![ModelSpec::new(ModelVariant::cppo_last_diverge(j), j, priors)?],
        })
    }
}

impl fmt::Display for AnalysisModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AnalysisModel {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        AnalysisModel::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| format!("unknown model {s:?} (expected sep-logistic, po, ppo-u, cppo-linear or cppo-last)"))
    }
}

/// Prior standard deviations for the zero-centred normal effect priors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Proportional log-OR, `zeta`, and separate-logistic `theta`.
    pub sd_effect: f64,
    /// Non-PO increments `gamma_k` / `gamma`.
    pub sd_increment: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { sd_effect: 100.0, sd_increment: 100.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelVariant {
    /// Binary logistic model on the dichotomy at `cutpoint`.
    SepLogistic { cutpoint: usize },
    Po,
    PpoUnconstrained,
    /// Constrained PPO with fixed scalars `Gamma_k` (`k = 2..=j`, `Gamma_2 = 0`).
    Cppo { scalars: Vec<f64> },
}

impl ModelVariant {
    /// `Gamma_k = k - 2`.
    pub fn cppo_linear(j: usize) -> Self {
        ModelVariant::Cppo { scalars: (2..=j).map(|k| (k - 2) as f64).collect() }
    }

    /// `Gamma_k = 0` below the top cut-point, `Gamma_j = 1`.
    pub fn cppo_last_diverge(j: usize) -> Self {
        let mut s = vec![0.0; j - 1];
        s[j - 2] = 1.0;
        ModelVariant::Cppo { scalars: s }
    }
}

/// One fittable model: variant, category count and priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: ModelVariant,
    pub j: usize,
    pub prior_sd_effect: f64,
    pub prior_sd_increment: f64,
}

/// A flat parameter vector; its layout is defined by the owning [`ModelSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Log density and gradient at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDensityResult {
    pub logp: f64,
    pub grad: Vec<f64>,
}

impl ModelSpec {
    pub fn new(variant: ModelVariant, j: usize, priors: &PriorConfig) -> Result<Self> {
        if j < 2 {
            return Err(Error::ShapeMismatch(format!("need j >= 2, got {j}")));
        }
        if !(priors.sd_effect > 0.0 && priors.sd_increment > 0.0) {
            return Err(Error::ShapeMismatch("prior standard deviations must be positive".into()));
        }
        match &variant {
            ModelVariant::SepLogistic { cutpoint } if !(2..=j).contains(cutpoint) => {
                return Err(Error::ShapeMismatch(format!("cut-point {cutpoint} outside 2..={j}")));
            }
            ModelVariant::Cppo { scalars } => {
                if scalars.len() != j - 1 {
                    return Err(Error::ShapeMismatch(format!("need {} fixed scalars, got {}", j - 1, scalars.len())));
                }
                if scalars[0] != 0.0 {
                    return Err(Error::ShapeMismatch("the first fixed scalar must be 0".into()));
                }
            }
            _ => {}
        }
        Ok(Self { variant, j, prior_sd_effect: priors.sd_effect, prior_sd_increment: priors.sd_increment })
    }

    pub fn po(j: usize) -> Self {
        Self::new(ModelVariant::Po, j, &PriorConfig::default()).expect("valid PO spec")
    }

    /// Category count of the data this spec is evaluated on.
    pub fn data_j(&self) -> usize {
        match self.variant {
            ModelVariant::SepLogistic { .. } => 2,
            _ => self.j,
        }
    }

    pub fn n_baseline(&self) -> usize {
        self.data_j() - 1
    }

    pub fn n_effects(&self) -> usize {
        match &self.variant {
            ModelVariant::SepLogistic { .. } | ModelVariant::Po => 1,
            ModelVariant::PpoUnconstrained => self.j - 1,
            ModelVariant::Cppo { .. } => 2,
        }
    }

    pub fn dim(&self) -> usize {
        self.n_baseline() + self.n_effects()
    }

    /// Cut-point labels this spec reports on.
    pub fn cutpoints(&self) -> Vec<usize> {
        match self.variant {
            ModelVariant::SepLogistic { cutpoint } => vec![cutpoint],
            _ => (2..=self.j).collect(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.n_baseline()).map(|i| format!("u[{i}]")).collect();
        match &self.variant {
            ModelVariant::SepLogistic { cutpoint } => names.push(format!("theta[{cutpoint}]")),
            ModelVariant::Po => names.push("beta".into()),
            ModelVariant::PpoUnconstrained => {
                names.push("zeta".into());
                names.extend((3..=self.j).map(|k| format!("gamma[{k}]")));
            }
            ModelVariant::Cppo { .. } => {
                names.push("zeta".into());
                names.push("gamma".into());
            }
        }
        names
    }

    fn check_len(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!("parameter vector has {} entries, expected {}", p.len(), self.dim())));
        }
        Ok(())
    }

    /// Prior SD for effect coordinate `i`.
    fn effect_sd(&self, i: usize) -> f64 {
        if i == 0 {
            self.prior_sd_effect
        } else {
            self.prior_sd_increment
        }
    }

    /// Arm-1 offsets on each modelled cumulative logit.
    fn offsets(&self, effects: &[f64]) -> Vec<f64> {
        let m = self.data_j() - 1;
        match &self.variant {
            ModelVariant::SepLogistic { .. } | ModelVariant::Po => vec![effects[0]; m],
            ModelVariant::PpoUnconstrained => {
                let mut d = Vec::with_capacity(m);
                d.push(effects[0]);
                d.extend(effects[1..].iter().map(|g| effects[0] + g));
                d
            }
            ModelVariant::Cppo { scalars } => scalars.iter().map(|s| effects[0] + s * effects[1]).collect(),
        }
    }

    /// Chain rule from offset gradients onto the effect block.
    fn offsets_backprop(&self, g_delta: &[f64], g_effects: &mut [f64]) {
        let total: f64 = g_delta.iter().sum();
        g_effects[0] += total;
        match &self.variant {
            ModelVariant::SepLogistic { .. } | ModelVariant::Po => {}
            ModelVariant::PpoUnconstrained => {
                for (g, d) in g_effects[1..].iter_mut().zip(&g_delta[1..]) {
                    *g += d;
                }
            }
            ModelVariant::Cppo { scalars } => {
                g_effects[1] += scalars.iter().zip(g_delta).map(|(s, d)| s * d).sum::<f64>();
            }
        }
    }

    /// Control-arm intercepts `alpha_k`.
    pub fn baseline_cumlogits(&self, p: &[f64]) -> CumulativeLogits {
        let sb = StickBreaking::forward(&p[..self.n_baseline()]);
        let (upper, lower) = tails(&sb.probs);
        CumulativeLogits(upper.iter().zip(&lower).map(|(s, l)| s.ln() - l.ln()).collect())
    }

    /// Cumulative logits for arm 0 (control) or 1 (treatment).
    pub fn cumlogits_for_arm(&self, p: &ParamVector, arm: usize) -> Result<CumulativeLogits> {
        self.check_len(&p.0)?;
        let alpha = self.baseline_cumlogits(&p.0);
        if arm == 0 {
            return Ok(alpha);
        }
        let d = self.offsets(&p.0[self.n_baseline()..]);
        Ok(CumulativeLogits(alpha.0.iter().zip(&d).map(|(a, d)| a + d).collect()))
    }

    /// Cut-point log-ORs implied by `p` (length 1 for separate logistic).
    pub fn cutpoint_log_ors(&self, p: &[f64]) -> Vec<f64> {
        self.offsets(&p[self.n_baseline()..])
    }

    pub fn log_posterior(&self, p: &ParamVector, data: &OrdinalCounts) -> Result<LogDensityResult> {
        self.check_len(&p.0)?;
        self.check_data(data)?;
        let mut grad = vec![0.0; self.dim()];
        let logp = self.log_posterior_unchecked(&p.0, data, &mut grad);
        Ok(LogDensityResult { logp, grad })
    }

    pub fn check_data(&self, data: &OrdinalCounts) -> Result<()> {
        if data.j() != self.data_j() {
            return Err(Error::ShapeMismatch(format!("data has {} categories, model expects {}", data.j(), self.data_j())));
        }
        Ok(())
    }

    /// Log posterior (up to a constant) and its gradient. Returns `-inf` with a
    /// zero gradient when any implied category probability is not positive.
    pub(crate) fn log_posterior_unchecked(&self, x: &[f64], data: &OrdinalCounts, grad: &mut [f64]) -> f64 {
        let nb = self.n_baseline();
        let jd = nb + 1;
        let (u, effects) = x.split_at(nb);
        grad.iter_mut().for_each(|g| *g = 0.0);

        let sb = StickBreaking::forward(u);
        let pi = &sb.probs;
        if pi.iter().any(|&p| !(p > 0.0)) {
            return f64::NEG_INFINITY;
        }
        let (upper, lower) = tails(pi);

        let mut logp = sb.log_jacobian;
        let mut g_pi = vec![0.0; jd];
        for (m, &n) in data.arm(0).iter().enumerate() {
            if n > 0 {
                logp += n as f64 * sb.log_probs[m];
                g_pi[m] += n as f64 / pi[m];
            }
        }

        let delta = self.offsets(effects);
        let eta: Vec<f64> = (0..nb).map(|i| upper[i].ln() - lower[i].ln() + delta[i]).collect();
        if eta.iter().any(|e| !e.is_finite()) || eta.windows(2).any(|w| !(w[0] > w[1])) {
            return f64::NEG_INFINITY;
        }

        let mut g_eta = vec![0.0; nb];
        for (m, &n) in data.arm(1).iter().enumerate() {
            let c = n as f64;
            if m == 0 {
                let b = eta[0];
                logp += c * log_sigmoid(-b);
                g_eta[0] -= c * sigmoid(b);
            } else if m == jd - 1 {
                let a = eta[nb - 1];
                logp += c * log_sigmoid(a);
                g_eta[nb - 1] += c * sigmoid(-a);
            } else {
                let (a, b) = (eta[m - 1], eta[m]);
                let lp = log_sigmoid(a) + log_sigmoid(-b) + log1m_exp_neg(a - b);
                if !lp.is_finite() {
                    return f64::NEG_INFINITY;
                }
                if n > 0 {
                    logp += c * lp;
                    let r = 1.0 / (a - b).exp_m1();
                    g_eta[m - 1] += c * (sigmoid(-a) + r);
                    g_eta[m] -= c * (sigmoid(b) + r);
                }
            }
        }

        // alpha_i = ln S_i - ln L_i, S_i = sum_{m > i} pi_m, L_i = sum_{m <= i} pi_m
        let mut acc_s = 0.0;
        for m in 0..jd {
            if m >= 1 {
                acc_s += g_eta[m - 1] / upper[m - 1];
            }
            g_pi[m] += acc_s;
        }
        let mut acc_l = 0.0;
        for m in (0..jd).rev() {
            if m < nb {
                acc_l += g_eta[m] / lower[m];
            }
            g_pi[m] -= acc_l;
        }
        let g_u = sb.backprop(&g_pi);
        grad[..nb].copy_from_slice(&g_u);

        let g_eff = &mut grad[nb..];
        self.offsets_backprop(&g_eta, g_eff);
        for (i, (&e, g)) in effects.iter().zip(g_eff.iter_mut()).enumerate() {
            let sd = self.effect_sd(i);
            logp += -0.5 * (e / sd).powi(2) - sd.ln() - LN_SQRT_2PI;
            *g -= e / (sd * sd);
        }
        // Far enough into the tails the chain rule overflows even though the
        // density is representable; treat such points as outside the support.
        if !logp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            return f64::NEG_INFINITY;
        }
        logp
    }

    /// Starting point: baseline from smoothed pooled frequencies, zero effects,
    /// then uniform jitter in `(-jitter, jitter)` redrawn until the density is
    /// finite.
    pub fn initial_point<R: Rng + ?Sized>(&self, data: &OrdinalCounts, rng: &mut R, jitter: f64) -> Result<ParamVector> {
        self.check_data(data)?;
        let pooled = data.pooled();
        let total: f64 = pooled.iter().map(|&c| c as f64 + 0.5).sum();
        let freqs: Vec<f64> = pooled.iter().map(|&c| (c as f64 + 0.5) / total).collect();
        let s: f64 = freqs.iter().sum();
        let simplex = Simplex::new(freqs.iter().map(|f| f / s).collect())?;
        let mut base = unconstrained_from_simplex(&simplex)?;
        base.resize(self.dim(), 0.0);

        let mut grad = vec![0.0; self.dim()];
        let attempts = if jitter > 0.0 { INIT_ATTEMPTS } else { 1 };
        for a in 0..attempts {
            // Shrink towards the empirical start, which always has finite
            // density, so that highly constrained models still initialise.
            let width = jitter * 0.95f64.powi(a as i32);
            let x: Vec<f64> = if jitter > 0.0 {
                base.iter().map(|b| b + rng.random_range(-width..width)).collect()
            } else {
                base.clone()
            };
            let lp = self.log_posterior_unchecked(&x, data, &mut grad);
            if lp.is_finite() {
                return Ok(ParamVector(x));
            }
        }
        Err(Error::InitFailure { attempts })
    }
}

fn tails(pi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nb = pi.len() - 1;
    let mut upper = vec![0.0; nb];
    let mut acc = 0.0;
    for i in (0..nb).rev() {
        acc += pi[i + 1];
        upper[i] = acc;
    }
    let mut lower = vec![0.0; nb];
    let mut acc = 0.0;
    for i in 0..nb {
        acc += pi[i];
        lower[i] = acc;
    }
    (upper, lower)
}

/// A model bound to its data, usable as a sampler target.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorTarget<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a OrdinalCounts,
}

impl<'a> PosteriorTarget<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a OrdinalCounts) -> Result<Self> {
        spec.check_data(data)?;
        Ok(Self { spec, data })
    }
}

impl LogDensity for PosteriorTarget<'_> {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn log_density(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.spec.log_posterior_unchecked(x, self.data, grad)
    }
}
