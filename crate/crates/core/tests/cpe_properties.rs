use approx::assert_abs_diff_eq;
use coe_core::acd::RawAtomTable;
use coe_core::clustering::{cluster, AtomCatalog, LexicalOracle, MergePolicy};
use coe_core::cpe::{self, LogBase};
use num_rational::Ratio;
use proptest::prelude::*;

fn catalog(counts: &[u64]) -> AtomCatalog {
    let names: Vec<String> = (0..counts.len()).map(|i| format!("atom{i}")).collect();
    let table = RawAtomTable::from_counts(names.iter().map(String::as_str).zip(counts.iter().copied())).unwrap();
    AtomCatalog::unclustered(&table)
}

/// Straight loop over counts plus unit pads.
fn oracle(counts: &[u64], n: usize) -> f64 {
    let pad = n.saturating_sub(counts.len());
    let mut all: Vec<u64> = counts.to_vec();
    all.extend(std::iter::repeat_n(1, pad));
    let total: u64 = all.iter().sum();
    if all.len() < 2 {
        return 0.0;
    }
    let mut h = 0.0;
    for c in &all {
        let p = *c as f64 / total as f64;
        h -= p * p.ln();
    }
    h / (all.len() as f64).ln()
}

proptest! {
    #[test]
    fn padded_matches_oracle(counts in prop::collection::vec(1u64..100, 1..60), n in 1usize..80) {
        let cat = catalog(&counts);
        let dist = cpe::distribution::<f64>(&cat, 3, n).unwrap();
        prop_assert_eq!(dist.pad, n.saturating_sub(counts.len()));
        let h = cpe::cpe_padded(&dist);
        prop_assert!((0.0..=1.0).contains(&h));
        let expected = oracle(&counts, n);
        prop_assert!((h - expected).abs() < 1e-12, "{} vs {}", h, expected);
    }

    #[test]
    fn distribution_invariants(counts in prop::collection::vec(1u64..30, 1..20), q in 1usize..4, n in 1usize..25) {
        let cat = catalog(&counts);
        let dist = cpe::distribution::<f64>(&cat, q, n).unwrap();
        prop_assert_eq!(dist.pad, n.saturating_sub(counts.len()));
        prop_assert_eq!(dist.entries.len(), counts.len() + dist.pad);
        prop_assert!(dist.entries.iter().filter(|e| e.padding).all(|e| e.count == 1));
        let sum: f64 = dist.probabilities().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        let exact: Ratio<u64> = dist.exact_probabilities().into_iter().sum();
        prop_assert_eq!(exact, Ratio::from_integer(1));
        let base_e = cpe::cpe_padded_in(&dist, LogBase::Natural);
        let base_2 = cpe::cpe_padded_in(&dist, LogBase::Two);
        prop_assert!((base_e - base_2).abs() < 1e-12);
        let h32 = cpe::cpe_padded(&cpe::distribution::<f32>(&cat, q, n).unwrap());
        prop_assert!((h32 as f64 - base_e).abs() < 1e-4);
    }

    #[test]
    fn merging_never_raises_clustered_support(counts in prop::collection::vec(1u64..10, 1..8)) {
        const WORDS: [&str; 8] = ["red", "blue", "green", "gray", "crimson", "navy", "lime", "slate"];
        let table = RawAtomTable::from_counts(WORDS.iter().copied().zip(counts.iter().copied())).unwrap();
        let oracle = LexicalOracle::new().with_group(&["red", "crimson"]).with_group(&["blue", "navy"]);
        let cat = cluster(&table, MergePolicy::Strict, &oracle).unwrap();
        prop_assert!(cat.p_star() <= table.p());
        prop_assert_eq!(cat.counts().iter().sum::<u64>(), table.total_slots());
        prop_assert!(cpe::cpe_clustered::<f64>(&cat).is_finite());
    }
}

#[test]
fn analytic_anchors() {
    let uniform = catalog(&[1; 45]);
    let d = cpe::distribution::<f64>(&uniform, 3, 15).unwrap();
    assert_eq!(cpe::cpe_padded(&d), 1.0);

    let mono = catalog(&[45]);
    let d = cpe::distribution::<f64>(&mono, 3, 15).unwrap();
    assert_eq!(d.pad, 14);
    assert_abs_diff_eq!(cpe::cpe_padded(&d), 0.4336, epsilon = 1e-3);
    assert_abs_diff_eq!(cpe::cpe_padded(&d), oracle(&[45], 15), epsilon = 1e-12);
    assert_eq!(cpe::cpe_clustered::<f64>(&mono), 0.0);
}

#[test]
fn padding_lowers_entropy_of_few_even_atoms() {
    // Two atoms splitting 45 slots almost evenly look maximally spread
    // before padding.
    let cat = catalog(&[23, 22]);
    let clustered = cpe::cpe_clustered::<f64>(&cat);
    let padded = cpe::cpe_padded(&cpe::distribution::<f64>(&cat, 3, 15).unwrap());
    assert!(clustered > 0.99);
    assert!(padded < 0.65, "{padded}");
    for p_star in 2..15u64 {
        let c = 45 / p_star;
        let counts = vec![c; p_star as usize];
        let cat = catalog(&counts);
        let padded = cpe::cpe_padded(&cpe::distribution::<f64>(&cat, 3, 15).unwrap());
        assert_eq!(cpe::cpe_clustered::<f64>(&cat), 1.0);
        assert!(padded < 1.0, "P* = {p_star}");
    }
    // Enough atoms: no padding, no change.
    let wide = catalog(&[3; 15]);
    let d = cpe::distribution::<f64>(&wide, 3, 15).unwrap();
    assert_eq!(d.pad, 0);
    assert_eq!(cpe::cpe_padded(&d), cpe::cpe_clustered::<f64>(&wide));
}

#[test]
fn no_merge_catalog_equals_naive() {
    let table = RawAtomTable::from_counts([("a", 7), ("b", 5), ("c", 2), ("d", 1)]).unwrap();
    let cat = cluster(&table, MergePolicy::Strict, &LexicalOracle::new()).unwrap();
    assert_eq!(cpe::cpe_clustered::<f64>(&cat), cpe::cpe_naive::<f64>(&table));
}

#[test]
fn layer_and_model_means() {
    let s = |h: f64| cpe::CpeScore {
        naive: h,
        clustered: h,
        padded: h,
    };
    let l1 = cpe::layer_cpe("a", 2, &[s(0.4), s(0.6)]).unwrap();
    assert_abs_diff_eq!(l1.mean_h, 0.5, epsilon = 1e-15);
    let l2 = cpe::layer_cpe("b", 1, &[s(0.81)]).unwrap();
    assert_eq!(l2.mean_h, 0.81);
    let m = cpe::model_cpe(&[l1, l2]).unwrap();
    assert_abs_diff_eq!(m.mean_h, 0.655, epsilon = 1e-12);
    assert!(cpe::layer_cpe::<f64>("c", 0, &[]).is_err());
    assert!(cpe::model_cpe::<f64>(&[]).is_err());
}
