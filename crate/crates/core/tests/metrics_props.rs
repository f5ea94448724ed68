use laminet_core::metrics::{aggregate, wilcoxon_signed, wilcoxon_signed_with, WilcoxonMode};
use proptest::prelude::*;

/// Brute force over all 2^n sign assignments of the non-zero differences,
/// with ranks taken from a pairwise count (ties share the mean rank). Rank
/// sums are kept doubled so every comparison is on integers.
fn enumerated_p(x: &[f64], y: &[f64]) -> f64 {
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return 1.0;
    }
    let doubled_rank: Vec<u64> = d
        .iter()
        .map(|a| {
            let below = d.iter().filter(|b| b.abs() < a.abs()).count() as u64;
            let equal = d.iter().filter(|b| b.abs() == a.abs()).count() as u64;
            2 * below + equal + 1
        })
        .collect();
    let observed: u64 = d.iter().zip(&doubled_rank).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let (mut low, mut high) = (0u64, 0u64);
    for signs in 0u64..1 << n {
        let w: u64 = (0..n).filter(|i| signs >> i & 1 == 1).map(|i| doubled_rank[i]).sum();
        low += (w <= observed) as u64;
        high += (w >= observed) as u64;
    }
    (2.0 * low.min(high) as f64 / (1u64 << n) as f64).min(1.0)
}

/// Small integer-valued pairs so ties and zero differences are common.
fn pairs(max_n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max_n).prop_flat_map(|n| {
        (
            proptest::collection::vec((-6i32..6).prop_map(f64::from), n),
            proptest::collection::vec(prop_oneof![(-6i32..6).prop_map(f64::from), -5.0..5.0f64], n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn exact_wilcoxon_matches_enumeration((x, y) in pairs(10)) {
        prop_assert_eq!(wilcoxon_signed_with(&x, &y, WilcoxonMode::Exact).unwrap(), enumerated_p(&x, &y));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn wilcoxon_is_symmetric_and_a_probability((x, y) in pairs(40)) {
        let p = wilcoxon_signed(&x, &y).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0);
        prop_assert_eq!(p, wilcoxon_signed(&y, &x).unwrap());
    }

    #[test]
    fn aggregate_orders_rmse_mad_msd(v in proptest::collection::vec(-1e3..1e3f64, 1..200)) {
        let a = aggregate(&v).unwrap();
        let eps = 1e-12 * (1.0 + a.rmse);
        prop_assert!(a.rmse + eps >= a.mad);
        prop_assert!(a.mad + eps >= a.msd.abs());
        prop_assert!(a.q025 <= a.q975);
    }

    #[test]
    fn aggregate_ignores_sample_order(mut v in proptest::collection::vec(-1e3..1e3f64, 1..100), seed in any::<u64>()) {
        let a = aggregate(&v).unwrap();
        v.sort_by(f64::total_cmp);
        let k = (seed % v.len() as u64) as usize;
        v.rotate_left(k);
        let b = aggregate(&v).unwrap();
        prop_assert!((a.mad - b.mad).abs() <= 1e-9 && (a.rmse - b.rmse).abs() <= 1e-9 && (a.msd - b.msd).abs() <= 1e-9);
        prop_assert_eq!((a.q025, a.q975), (b.q025, b.q975));
    }
}

#[test]
fn three_positive_differences_give_a_quarter() {
    assert_eq!(wilcoxon_signed(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap(), 0.25);
    assert_eq!(enumerated_p(&[1.0, 2.0, 3.0], &[0.0; 3]), 0.25);
}

#[test]
fn normal_approximation_tracks_exact_at_twelve() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..12).map(|_| rng.gen_range(-0.8..1.0)).collect();
        let exact = wilcoxon_signed_with(&x, &y, WilcoxonMode::Exact).unwrap();
        let normal = wilcoxon_signed_with(&x, &y, WilcoxonMode::Normal).unwrap();
        assert!((exact - normal).abs() < 0.02, "exact {exact} normal {normal}");
    }
}
