//! Brute-force reference implementations shared by the property tests and
//! the acceptance suite. None of them calls into the code under test
//! except through the merge predicate handed to the clustering oracle.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(dead_code)]

/// Normalized entropy of the given counts, padded with unit counts up to `n`
/// entries, computed with a plain loop.
pub fn padded_entropy(counts: &[u64], n: usize) -> f64 {
    let mut all: Vec<u64> = counts.to_vec();
    while all.len() < n {
        all.push(1);
    }
    plain_entropy(&all)
}

pub fn plain_entropy(counts: &[u64]) -> f64 {
    if counts.len() < 2 {
        return 0.0;
    }
    let total: u64 = counts.iter().sum();
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.ln();
        }
    }
    (h / (counts.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Indices whose value is strictly above `alpha * max`, by linear scans:
/// repeatedly take the largest remaining qualifying value, lowest index
/// first on ties.
pub fn scan_select(values: &[f64], alpha: f64) -> Vec<usize> {
    let max = values
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        let first = values.iter().position(|v| *v == max);
        return first.into_iter().collect();
    }
    let threshold = alpha * max;
    let mut taken = vec![false; values.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for (i, v) in values.iter().enumerate() {
            if taken[i] || !(*v > threshold) {
                continue;
            }
            if best.is_none_or(|b| *v > values[b]) {
                best = Some(i);
            }
        }
        match best {
            Some(b) => {
                taken[b] = true;
                out.push(b);
            }
            None => return out,
        }
    }
}

/// Every set partition of `0..n` as a block label per element, blocks
/// numbered by first occurrence.
pub fn partitions(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        let next = prefix.iter().copied().max().map_or(0, |m| m + 1);
        for b in 0..=next {
            prefix.push(b);
            rec(prefix, n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n == 0 {
        out.push(Vec::new());
    } else {
        rec(&mut Vec::new(), n, &mut out);
    }
    out
}

/// All partitions consistent with representative-based merging:
/// representatives are first members, no representative merges with an
/// earlier one, and every other member merges with its representative and
/// with no earlier representative. `merges[r][j]` is the merge test of
/// representative `r` against candidate `j`.
pub fn consistent_partitions(merges: &[Vec<bool>]) -> Vec<Vec<usize>> {
    let n = merges.len();
    partitions(n)
        .into_iter()
        .filter(|labels| {
            let mut reps: Vec<usize> = Vec::new();
            for j in 0..n {
                if labels[j] == reps.len() {
                    if reps.iter().any(|&r| merges[r][j]) {
                        return false;
                    }
                    reps.push(j);
                } else {
                    let own = reps[labels[j]];
                    if !merges[own][j] || reps.iter().take_while(|&&r| r < own).any(|&r| merges[r][j]) {
                        return false;
                    }
                }
            }
            true
        })
        .collect()
}

/// Same contract as [`scan_select`], via an ordered set keyed on the bit
/// pattern of the (positive) values. Suitable for long vectors.
pub fn ranked_select(values: &[f64], alpha: f64) -> Vec<usize> {
    let max = values
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return values.iter().position(|v| *v == max).into_iter().collect();
    }
    let threshold = alpha * max;
    let ranked: std::collections::BTreeSet<(u64, usize)> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > threshold)
        .map(|(i, v)| (u64::MAX - v.to_bits(), i))
        .collect();
    ranked.into_iter().map(|(_, i)| i).collect()
}
