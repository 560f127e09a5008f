//! Analytic gradients against central finite differences.

use ordsim_core::posterior::ModelVariant;
use ordsim_core::verify::{self, FD_STEP, FD_TOLERANCE};
use ordsim_core::{ModelSpec, OrdinalCounts, ParamVector, PriorConfig};
use proptest::prelude::*;

#[test]
fn random_points_for_every_variant() {
    let rep = verify::gradient_suite(100, 31);
    println!("{rep}");
    assert_eq!(rep.checks.len(), 5);
    assert!(rep.passed());
}

#[test]
fn interior_point_of_each_variant() {
    let data = OrdinalCounts::new(vec![12, 30, 25, 9], vec![8, 22, 31, 15]).unwrap();
    let variants = [
        ModelVariant::SepLogistic { cutpoint: 3 },
        ModelVariant::Po,
        ModelVariant::PpoUnconstrained,
        ModelVariant::cppo_linear(4),
        ModelVariant::cppo_last_diverge(4),
    ];
    for v in variants {
        let spec = ModelSpec::new(v.clone(), 4, &PriorConfig { sd_effect: 2.0, sd_increment: 1.0 }).unwrap();
        let x: Vec<f64> = (0..spec.dim()).map(|i| 0.1 * (i as f64 + 1.0) - 0.25).collect();
        let d = if spec.data_j() == 2 { data.dichotomize(3) } else { data.clone() };
        let err = verify::max_fd_error(&spec, &d, &x, FD_STEP).unwrap();
        assert!(err < FD_TOLERANCE, "{v:?}: {err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Far into the tails the density is either finite with a finite
    /// gradient or reported as outside the support.
    #[test]
    fn extreme_coordinates_never_yield_nan(
        u in prop::collection::vec(-800.0f64..800.0, 4),
        n0 in prop::collection::vec(0u64..50, 5),
        n1 in prop::collection::vec(0u64..50, 5),
    ) {
        let data = OrdinalCounts::with_empty_arms(n0, n1).unwrap();
        let spec = ModelSpec::new(ModelVariant::cppo_linear(5), 5, &PriorConfig::default()).unwrap();
        let mut x = u.clone();
        x.extend([u[0] / 10.0, u[1] / 10.0]);
        let r = spec.log_posterior(&ParamVector(x), &data).unwrap();
        prop_assert!(!r.logp.is_nan());
        if r.logp.is_finite() {
            prop_assert!(r.grad.iter().all(|g| g.is_finite()));
        }
    }
}
