//! Sampler checks against targets with known answers.

use ordsim_core::dgm::{discretize_beta, sample_trial, TruePair};
use ordsim_core::posterior::ModelVariant;
use ordsim_core::sampler::{fit_spec, run_model};
use ordsim_core::verify;
use ordsim_core::{AnalysisModel, ControlShape, ModelSpec, PriorConfig, SamplerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn analytic_normal_targets() {
    let rep = verify::sampler_suite(&SamplerConfig { seed: 5, ..SamplerConfig::default() });
    println!("{rep}");
    assert!(rep.passed());
}

#[test]
fn po_posterior_matches_dense_grid() {
    let rep = verify::oracle_suite(&SamplerConfig { seed: 9, ..SamplerConfig::default() });
    println!("{rep}");
    assert!(rep.passed());
}

fn po_dataset(j: usize, n: u64, beta: f64, seed: u64) -> ordsim_core::OrdinalCounts {
    let pi0 = discretize_beta(ControlShape::Symmetric, j);
    let tp = TruePair::from_shift(&pi0, vec![beta; j - 1]).unwrap();
    sample_trial(&tp, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn large_sample_po_consistency_and_nesting() {
    let beta = 1.5f64.ln();
    let data = po_dataset(3, 4000, beta, 77);
    let cfg = SamplerConfig { warmup: 1000, post_warmup_per_chain: 1000, seed: 3, ..SamplerConfig::default() };
    let po = run_model(AnalysisModel::Po, &data, &PriorConfig::default(), &cfg).unwrap();
    let draws = po.draws.pooled(0);
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((po.summaries[0].median - beta).abs() < 3.0 * sd);
    assert!(po.diagnostics.rhat.iter().all(|&r| r < 1.01));
    assert_eq!(po.draws.n_rows(), 4000);

    let ppo = run_model(AnalysisModel::PpoU, &data, &PriorConfig::default(), &cfg).unwrap();
    for s in &ppo.summaries {
        assert!(s.covers(po.summaries[0].median), "{s:?}");
    }
}

#[test]
fn fits_are_deterministic() {
    let data = po_dataset(4, 300, 0.2, 1);
    let cfg = SamplerConfig { warmup: 200, post_warmup_per_chain: 200, seed: 12, ..SamplerConfig::default() };
    let spec = ModelSpec::new(ModelVariant::cppo_linear(4), 4, &PriorConfig::default()).unwrap();
    let a = fit_spec(&spec, &data, &cfg).unwrap();
    let b = fit_spec(&spec, &data, &cfg).unwrap();
    assert_eq!(a.chains, b.chains);
    let c = fit_spec(&spec, &data, &SamplerConfig { seed: 13, ..cfg }).unwrap();
    assert_ne!(a.chains[0].draws, c.chains[0].draws);
}

#[test]
fn sep_logistic_assembles_every_cutpoint() {
    let data = po_dataset(5, 500, 0.3, 2);
    let cfg = SamplerConfig { warmup: 200, post_warmup_per_chain: 200, seed: 4, ..SamplerConfig::default() };
    let fit = run_model(AnalysisModel::SepLogistic, &data, &PriorConfig::default(), &cfg).unwrap();
    assert_eq!(fit.draws.cutpoints, vec![2, 3, 4, 5]);
    assert_eq!(fit.diagnostics.rhat.len(), 4);
    assert!(fit.summaries.iter().all(|s| s.ci_low <= s.median && s.median <= s.ci_high));
}
