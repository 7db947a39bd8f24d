#[path = "support/oracles.rs"]
mod oracles;

use coe_core::acd::{Atom, RawAtomTable};
use coe_core::clustering::{cluster, merge_decision, LexicalOracle, MergePolicy, Verdict, VerdictTable};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn atoms(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("atom {}", (b'a' + i as u8) as char)).collect()
}

fn verdict_of(code: u8) -> Verdict {
    match code % 3 {
        0 => Verdict::Entail,
        1 => Verdict::Neutral,
        _ => Verdict::Contradict,
    }
}

fn check(names: &[String], counts: &[u64], codes: &[u8], policy: MergePolicy) -> Result<(), TestCaseError> {
    let n = names.len();
    let parsed: Vec<Atom> = names.iter().map(|a| Atom::new(a).unwrap()).collect();
    let mut table = VerdictTable::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                table.insert(&parsed[i], &parsed[j], verdict_of(codes[i * n + j]));
            }
        }
    }
    let raw = RawAtomTable::from_counts(names.iter().map(String::as_str).zip(counts.iter().copied())).unwrap();
    let catalog = cluster(&raw, policy, &table).unwrap();

    let merges: Vec<Vec<bool>> = (0..n)
        .map(|r| {
            (0..n)
                .map(|j| merge_decision(&parsed[r], &parsed[j], policy, &table).unwrap())
                .collect()
        })
        .collect();
    let solutions = oracles::consistent_partitions(&merges);
    prop_assert_eq!(solutions.len(), 1, "representative merging must have a unique outcome");
    let labels = &solutions[0];
    let blocks = labels.iter().max().map_or(0, |m| m + 1);
    prop_assert_eq!(catalog.p_star(), blocks);
    for (b, cluster) in catalog.clusters.iter().enumerate() {
        let members: Vec<&str> = (0..n).filter(|&j| labels[j] == b).map(|j| names[j].as_str()).collect();
        let got: Vec<&str> = cluster.members.iter().map(Atom::as_str).collect();
        prop_assert_eq!(&got, &members);
        let count: u64 = (0..n).filter(|&j| labels[j] == b).map(|j| counts[j]).sum();
        prop_assert_eq!(cluster.count, count);
    }
    prop_assert_eq!(catalog.counts().iter().sum::<u64>(), counts.iter().sum::<u64>());
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn greedy_matches_partition_oracle(
        n in 1usize..=7,
        counts in prop::collection::vec(1u64..20, 7),
        codes in prop::collection::vec(0u8..3, 49),
        literal in any::<bool>(),
    ) {
        let policy = if literal { MergePolicy::Lenient } else { MergePolicy::Strict };
        check(&atoms(n), &counts[..n], &codes[..n * n], policy)?;
    }
}

#[test]
fn ten_atom_tables_match_oracle() {
    let names = atoms(10);
    let counts: Vec<u64> = (1..=10).collect();
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes: Vec<u8> = (0..100).map(|_| rng.random_range(0..3)).collect();
        for policy in [MergePolicy::Strict, MergePolicy::Lenient] {
            check(&names, &counts, &codes, policy).unwrap();
        }
    }
}

#[test]
fn barrier_fence_entry_gate() {
    let raw = RawAtomTable::from_counts([("barrier", 5), ("fence", 3), ("entry", 2), ("gate", 1)]).unwrap();
    let oracle = LexicalOracle::new()
        .with_group(&["barrier", "fence"])
        .with_group(&["entry", "gate"]);
    let catalog = cluster(&raw, MergePolicy::Strict, &oracle).unwrap();
    let summary: Vec<(&str, u64)> = catalog
        .clusters
        .iter()
        .map(|c| (c.representative.as_str(), c.count))
        .collect();
    assert_eq!(summary, [("barrier", 8), ("entry", 3)]);
    assert_eq!(
        catalog.clusters[0].members.iter().map(Atom::as_str).collect::<Vec<_>>(),
        ["barrier", "fence"]
    );
}

#[test]
fn policies_differ_on_neutral_pairs() {
    let raw = RawAtomTable::from_counts([("blue", 2), ("yellow", 1)]).unwrap();
    let oracle = LexicalOracle::new();
    assert_eq!(cluster(&raw, MergePolicy::Strict, &oracle).unwrap().p_star(), 2);
    assert_eq!(cluster(&raw, MergePolicy::Lenient, &oracle).unwrap().p_star(), 1);
}
