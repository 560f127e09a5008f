//! Ordinal-outcome mathematics shared by every other module.
//!
//! Orientation: cut-point `k` (labelled `2..=j`) dichotomises the scale into
//! `Y < k` versus `Y >= k`, and cumulative logits are `logit P(Y >= k)`. They
//! are therefore strictly decreasing in `k`. Storage is 0-based: index `m` of a
//! cumulative-logit vector holds cut-point `m + 2`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log sigmoid(x)`, stable for |x| in the hundreds.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

#[inline]
pub fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

/// `log(1 - exp(-d))` for `d > 0`.
#[inline]
pub(crate) fn log1m_exp_neg(d: f64) -> f64 {
    if d > std::f64::consts::LN_2 {
        (-(-d).exp()).ln_1p()
    } else {
        (-(-d).exp_m1()).ln()
    }
}

/// Per-arm counts over `j` ordered categories. Arm 0 is control, arm 1 treatment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrdinalCounts {
    j: usize,
    counts: [Vec<u64>; 2],
}

impl OrdinalCounts {
    /// Builds counts, requiring at least one observation in each arm.
    pub fn new(control: Vec<u64>, treatment: Vec<u64>) -> Result<Self> {
        let c = Self::with_empty_arms(control, treatment)?;
        for arm in 0..2 {
            if c.arm_total(arm) == 0 {
                return Err(Error::InvalidCounts(format!("arm {arm} has no observations")));
            }
        }
        Ok(c)
    }

    /// Like [`OrdinalCounts::new`] but allows empty arms (prior-only evaluation).
    pub fn with_empty_arms(control: Vec<u64>, treatment: Vec<u64>) -> Result<Self> {
        let j = control.len();
        if j < 2 {
            return Err(Error::InvalidCounts(format!("need j >= 2 categories, got {j}")));
        }
        if treatment.len() != j {
            return Err(Error::InvalidCounts(format!(
                "arm lengths differ: {} vs {}",
                j,
                treatment.len()
            )));
        }
        Ok(Self { j, counts: [control, treatment] })
    }

    /// All-zero counts.
    pub fn zeros(j: usize) -> Result<Self> {
        Self::with_empty_arms(vec![0; j], vec![0; j])
    }

    pub fn j(&self) -> usize {
        self.j
    }

    pub fn arm(&self, arm: usize) -> &[u64] {
        &self.counts[arm]
    }

    pub fn arm_total(&self, arm: usize) -> u64 {
        self.counts[arm].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.arm_total(0) + self.arm_total(1)
    }

    /// Category counts summed over arms.
    pub fn pooled(&self) -> Vec<u64> {
        self.counts[0].iter().zip(&self.counts[1]).map(|(a, b)| a + b).collect()
    }

    /// Collapses to two categories at cut-point `k`: `{< k}` and `{>= k}`.
    ///
    /// Panics if `k` is not in `2..=j`.
    pub fn dichotomize(&self, k: usize) -> OrdinalCounts {
        assert!((2..=self.j).contains(&k), "cut-point {k} outside 2..={}", self.j);
        let split = |arm: &Vec<u64>| {
            let below: u64 = arm[..k - 1].iter().sum();
            let above: u64 = arm[k - 1..].iter().sum();
            vec![below, above]
        };
        OrdinalCounts { j: 2, counts: [split(&self.counts[0]), split(&self.counts[1])] }
    }
}

/// A probability vector over `j` categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Simplex {
    probs: Vec<f64>,
}

impl Simplex {
    pub const SUM_TOL: f64 = 1e-12;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidSimplex(format!("need >= 2 entries, got {}", probs.len())));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidSimplex(format!("entry {p} is negative or not finite")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::InvalidSimplex(format!("entries sum to {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(j: usize) -> Self {
        Self { probs: vec![1.0 / j as f64; j] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn j(&self) -> usize {
        self.probs.len()
    }

    /// `P(Y >= k)` for `k = 2..=j`, summed from the top for accuracy.
    pub fn upper_tails(&self) -> Vec<f64> {
        let j = self.j();
        let mut out = vec![0.0; j - 1];
        let mut acc = 0.0;
        for k in (1..j).rev() {
            acc += self.probs[k];
            out[k - 1] = acc;
        }
        out
    }

    /// `P(Y < k)` for `k = 2..=j`.
    pub fn lower_tails(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.probs[..self.j() - 1]
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect()
    }
}

impl TryFrom<Vec<f64>> for Simplex {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Simplex::new(v)
    }
}

impl From<Simplex> for Vec<f64> {
    fn from(s: Simplex) -> Self {
        s.probs
    }
}

/// `logit P(Y >= k)` for `k = 2..=j`. Not validated: model code produces
/// non-monotone vectors and decides what to do with them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeLogits(pub Vec<f64>);

impl CumulativeLogits {
    pub fn eta(&self) -> &[f64] {
        &self.0
    }

    /// Number of categories implied (`len + 1`).
    pub fn j(&self) -> usize {
        self.0.len() + 1
    }

    pub fn is_strictly_decreasing(&self) -> bool {
        self.0.windows(2).all(|w| w[0] > w[1])
    }
}

/// Category probability between two cumulative logits, `sigma(a) - sigma(b)`,
/// evaluated as `sigma(a) sigma(-b) (1 - exp(b - a))` to keep precision when
/// both logits are large. Negative when `b > a`.
#[inline]
fn band_prob(a: f64, b: f64) -> f64 {
    sigmoid(a) * sigmoid(-b) * (-(b - a).exp_m1())
}

/// Category probabilities from cumulative logits. Entries go negative when the
/// input is not strictly decreasing.
pub fn probs_from_cumlogits(eta: &CumulativeLogits) -> Vec<f64> {
    let e = eta.eta();
    let j = e.len() + 1;
    let mut p = Vec::with_capacity(j);
    p.push(sigmoid(-e[0]));
    for w in e.windows(2) {
        p.push(band_prob(w[0], w[1]));
    }
    p.push(sigmoid(e[j - 2]));
    p
}

/// Inverse of [`probs_from_cumlogits`].
pub fn cumlogits_from_probs(p: &Simplex) -> Result<CumulativeLogits> {
    let upper = p.upper_tails();
    let lower = p.lower_tails();
    let mut eta = Vec::with_capacity(upper.len());
    for (m, (&s, &l)) in upper.iter().zip(&lower).enumerate() {
        if s <= 0.0 || l <= 0.0 {
            return Err(Error::DegenerateTail { cutpoint: m + 2, value: s.min(1.0) });
        }
        eta.push(s.ln() - l.ln());
    }
    Ok(CumulativeLogits(eta))
}

/// Forward pass of the centred stick-breaking transform, with everything the
/// reverse pass needs.
#[derive(Debug, Clone)]
pub(crate) struct StickBreaking {
    /// Break fractions `z_k`, length `j - 1`.
    z: Vec<f64>,
    /// Stick remaining before break `k`, length `j` (`rem[0] = 1`).
    rem: Vec<f64>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub log_jacobian: f64,
}

impl StickBreaking {
    pub fn forward(u: &[f64]) -> Self {
        let km1 = u.len();
        let j = km1 + 1;
        let mut z = Vec::with_capacity(km1);
        let mut rem = Vec::with_capacity(j);
        let mut log_probs = Vec::with_capacity(j);
        let mut log_rem = 0.0;
        let mut log_jacobian = 0.0;
        rem.push(1.0);
        for (k, &uk) in u.iter().enumerate() {
            // Offset so that u = 0 maps to the uniform simplex.
            let x = uk - ((km1 - k) as f64).ln();
            let lz = log_sigmoid(x);
            let l1mz = log_sigmoid(-x);
            z.push(sigmoid(x));
            log_probs.push(log_rem + lz);
            log_jacobian += lz + l1mz + log_rem;
            log_rem += l1mz;
            rem.push(log_rem.exp());
        }
        log_probs.push(log_rem);
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        Self { z, rem, probs, log_probs, log_jacobian }
    }

    /// Gradient with respect to `u` of `f(probs) + log_jacobian`, given
    /// `grad_probs = df/dprobs` (all `j` entries treated as free).
    pub fn backprop(&self, grad_probs: &[f64]) -> Vec<f64> {
        let km1 = self.z.len();
        let mut grad_u = vec![0.0; km1];
        // Adjoint of rem[k] accumulated from later breaks.
        let mut g_rem = grad_probs[km1];
        for k in (0..km1).rev() {
            let z = self.z[k];
            let r = self.rem[k];
            let g_z = (grad_probs[k] - g_rem) * r;
            // d/dx [log z + log(1 - z)] = 1 - 2z, and each later break adds
            // log(1 - z) through its log_rem term, contributing -z.
            let later = (km1 - 1 - k) as f64;
            grad_u[k] = g_z * z * (1.0 - z) + (1.0 - 2.0 * z) - later * z;
            g_rem = grad_probs[k] * z + g_rem * (1.0 - z);
        }
        grad_u
    }
}

/// Maps `j - 1` unconstrained reals onto the open simplex and returns the log
/// absolute Jacobian determinant of the map (to the first `j - 1` simplex
/// coordinates). A flat Dirichlet target on the simplex corresponds to
/// exactly this log-Jacobian as the log density in `u`.
pub fn simplex_from_unconstrained(u: &[f64]) -> (Simplex, f64) {
    let sb = StickBreaking::forward(u);
    (Simplex { probs: sb.probs }, sb.log_jacobian)
}

/// Inverse of [`simplex_from_unconstrained`]; requires every entry positive.
pub fn unconstrained_from_simplex(p: &Simplex) -> Result<Vec<f64>> {
    let probs = p.probs();
    let j = probs.len();
    if let Some(k) = probs.iter().position(|&x| x <= 0.0) {
        return Err(Error::InvalidSimplex(format!("entry {} is zero; no interior preimage", k + 1)));
    }
    let upper = p.upper_tails();
    // z_k / (1 - z_k) = p_k / P(Y >= k + 2)
    Ok((0..j - 1)
        .map(|k| probs[k].ln() - upper[k].ln() + ((j - 1 - k) as f64).ln())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Gamma};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn probs_from_cumlogits_examples() {
        let p = probs_from_cumlogits(&CumulativeLogits(vec![0.0]));
        assert!(close(p[0], 0.5, 1e-15) && close(p[1], 0.5, 1e-15));

        let p = probs_from_cumlogits(&CumulativeLogits(vec![logit(0.8), logit(0.3)]));
        for (a, b) in p.iter().zip([0.2, 0.5, 0.3]) {
            assert!(close(*a, b, 1e-14), "{p:?}");
        }

        let p = probs_from_cumlogits(&CumulativeLogits(vec![-1.0, 1.0]));
        assert!(p[1] < 0.0);
        assert!(close(p[1], sigmoid(-1.0) - sigmoid(1.0), 1e-15));
    }

    #[test]
    fn cumlogits_from_probs_examples() {
        let e = cumlogits_from_probs(&Simplex::new(vec![0.5, 0.5]).unwrap()).unwrap();
        assert!(close(e.0[0], 0.0, 1e-15));

        let e = cumlogits_from_probs(&Simplex::new(vec![0.2, 0.5, 0.3]).unwrap()).unwrap();
        assert!(close(e.0[0], logit(0.8), 1e-14));
        assert!(close(e.0[1], logit(0.3), 1e-14));

        let err = cumlogits_from_probs(&Simplex::new(vec![0.5, 0.5, 0.0]).unwrap());
        assert!(matches!(err, Err(Error::DegenerateTail { cutpoint: 3, .. })));
    }

    #[test]
    fn stable_helpers_survive_extremes() {
        assert_eq!(sigmoid(-700.0).is_finite(), true);
        assert!(log_sigmoid(-700.0).is_finite());
        assert!(close(log_sigmoid(-700.0), -700.0, 1e-9));
        assert!(close(log_sigmoid(700.0), 0.0, 1e-300));
        let p = probs_from_cumlogits(&CumulativeLogits(vec![700.0, 699.0]));
        assert!(p.iter().all(|x| x.is_finite()));
        assert!(p[1] > 0.0);
    }

    #[test]
    fn simplex_from_zero_is_uniform() {
        let (s, _) = simplex_from_unconstrained(&[0.0, 0.0]);
        for p in s.probs() {
            assert!(close(*p, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn dichotomize_examples() {
        let c = OrdinalCounts::new(vec![10, 20, 30], vec![1, 2, 3]).unwrap();
        assert_eq!(c.dichotomize(2).arm(0), &[10, 50]);
        assert_eq!(c.dichotomize(3).arm(0), &[30, 30]);
        assert_eq!(c.dichotomize(3).arm(1)[1], 3);
    }

    #[test]
    fn counts_reject_empty_arm() {
        assert!(OrdinalCounts::new(vec![0, 0], vec![1, 2]).is_err());
        assert!(OrdinalCounts::new(vec![1], vec![1]).is_err());
        assert!(OrdinalCounts::new(vec![1, 2], vec![1]).is_err());
    }

    /// log |det d(p_1..p_{j-1}) / du| by central differences.
    fn numeric_log_jacobian(u: &[f64]) -> f64 {
        let n = u.len();
        let h = 1e-6;
        let mut m = vec![vec![0.0; n]; n];
        for c in 0..n {
            let mut up = u.to_vec();
            let mut dn = u.to_vec();
            up[c] += h;
            dn[c] -= h;
            let pu = simplex_from_unconstrained(&up).0;
            let pd = simplex_from_unconstrained(&dn).0;
            for r in 0..n {
                m[r][c] = (pu.probs()[r] - pd.probs()[r]) / (2.0 * h);
            }
        }
        // Gaussian elimination with partial pivoting.
        let mut logdet = 0.0;
        for col in 0..n {
            let piv = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
            m.swap(col, piv);
            let d = m[col][col];
            logdet += d.abs().ln();
            for r in col + 1..n {
                let f = m[r][col] / d;
                for c in col..n {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
        logdet
    }

    #[test]
    fn log_jacobian_matches_numeric_determinant() {
        for u in [vec![0.0, 0.0, 0.0], vec![0.3, -1.2, 2.0], vec![-2.0, 0.5, 0.1, 1.5]] {
            let (_, lj) = simplex_from_unconstrained(&u);
            let num = numeric_log_jacobian(&u);
            assert!(close(lj, num, 1e-6), "{lj} vs {num}");
        }
    }

    #[test]
    fn dirichlet_pushforward_moments() {
        // Draw uniform-simplex points with the gamma-ratio construction, pull
        // them back to u, push forward again and compare moments with 1/j.
        let j = 4;
        let n = 100_000;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let g = Gamma::new(1.0, 1.0).unwrap();
        let mut sums = vec![0.0; j];
        let mut sq = vec![0.0; j];
        for _ in 0..n {
            let x: Vec<f64> = (0..j).map(|_| g.sample(&mut rng)).collect();
            let t: f64 = x.iter().sum();
            let p = Simplex::new(x.iter().map(|v| v / t).collect()).unwrap();
            let u = unconstrained_from_simplex(&p).unwrap();
            let (q, _) = simplex_from_unconstrained(&u);
            for k in 0..j {
                sums[k] += q.probs()[k];
                sq[k] += q.probs()[k].powi(2);
            }
        }
        for k in 0..j {
            let mean = sums[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!((mean - 0.25).abs() < 3.0 * se, "k={k} mean={mean} se={se}");
        }
    }

    #[test]
    fn stick_breaking_backprop_matches_finite_differences() {
        let u = [0.4, -0.7, 1.1, 0.2];
        let w = [0.3, -1.0, 2.0, 0.5, -0.25];
        let f = |u: &[f64]| {
            let sb = StickBreaking::forward(u);
            sb.probs.iter().zip(&w).map(|(p, w)| p * w).sum::<f64>() + sb.log_jacobian
        };
        let sb = StickBreaking::forward(&u);
        let g = sb.backprop(&w);
        for i in 0..u.len() {
            let mut up = u;
            let mut dn = u;
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let fd = (f(&up) - f(&dn)) / 2e-6;
            assert!(close(g[i], fd, 1e-7), "{i}: {} vs {fd}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn cumlogit_round_trip(start in -4.0f64..4.0, steps in proptest::collection::vec(0.05f64..2.0, 1..8)) {
            let mut eta = vec![start];
            for s in &steps {
                let last = *eta.last().unwrap();
                eta.push(last - s);
            }
            let p = probs_from_cumlogits(&CumulativeLogits(eta.clone()));
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            let back = cumlogits_from_probs(&Simplex::new(p).unwrap()).unwrap();
            for (a, b) in back.0.iter().zip(&eta) {
                prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }

        #[test]
        fn probs_sum_to_one_for_any_eta(eta in proptest::collection::vec(-30.0f64..30.0, 1..10)) {
            let p = probs_from_cumlogits(&CumulativeLogits(eta));
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "sum = {sum}");
        }

        #[test]
        fn simplex_range_and_inverse(u in proptest::collection::vec(-5.0f64..5.0, 3)) {
            let (s, _) = simplex_from_unconstrained(&u);
            let sum: f64 = s.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.probs().iter().all(|&p| p > 0.0));
            let back = unconstrained_from_simplex(&s).unwrap();
            for (a, b) in back.iter().zip(&u) {
                prop_assert!((a - b).abs() < 1e-8);
            }
        }

        #[test]
        fn simplex_map_is_injective(u in proptest::collection::vec(-3.0f64..3.0, 3),
                                    d in proptest::collection::vec(-1.0f64..1.0, 3)) {
            let norm: f64 = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assume!(norm > 1e-3);
            let v: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a + 1e-5 * b / norm).collect();
            let (a, _) = simplex_from_unconstrained(&u);
            let (b, _) = simplex_from_unconstrained(&v);
            prop_assert!(a.probs() != b.probs());
        }

        #[test]
        fn dichotomize_preserves_totals(a in proptest::collection::vec(0u64..50, 2..9), k_raw in 0usize..100) {
            let j = a.len();
            let b: Vec<u64> = a.iter().rev().cloned().collect();
            let c = OrdinalCounts::with_empty_arms(a, b).unwrap();
            let k = 2 + k_raw % (j - 1);
            let d = c.dichotomize(k);
            prop_assert_eq!(d.arm_total(0), c.arm_total(0));
            prop_assert_eq!(d.arm_total(1), c.arm_total(1));
            prop_assert_eq!(d.arm(0)[1], c.arm(0)[k - 1..].iter().sum::<u64>());
        }
    }
}
