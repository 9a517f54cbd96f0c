mod common;

use proptest::prelude::*;

#[test]
fn set_identities_hold_on_random_profiles() {
    let out = common::strategy_algebra(1000, 0);
    assert_eq!(out.specific_meets_stubborn, 0, "{out:?}");
    assert_eq!(out.plastic_meets_stubborn, 0, "{out:?}");
    assert_eq!(out.rescaling_changed, 0, "{out:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identities_hold_for_any_seed(seed in any::<u64>()) {
        let out = common::strategy_algebra(5, seed);
        prop_assert_eq!(out.specific_meets_stubborn + out.plastic_meets_stubborn + out.rescaling_changed, 0);
    }

    #[test]
    fn standardized_tensors_have_zero_mean_unit_std(
        xs in prop::collection::vec(-1e3f64..1e3, 2..200),
        shift in -1e3f64..1e3,
        scale in 0.1f64..10.0,
    ) {
        let a = ndarray::Array1::from(xs.clone());
        let z = plab::tracking::standardize(a.view());
        let n = xs.len() as f64;
        let mean = z.sum() / n;
        let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let spread = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-6);
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-9);
        let moved = a.mapv(|x| x * scale + shift);
        let z2 = plab::tracking::standardize(moved.view());
        for (p, q) in z.iter().zip(z2.iter()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }
}
