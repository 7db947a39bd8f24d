//! Concept polysemanticity entropy.
//!
//! Three formulations share one normalized-entropy kernel:
//!
//! * naive: frequencies of the distinct raw atoms,
//! * clustered: frequencies of the merged clusters,
//! * padded: clustered, with `Pad = max(0, N - P*)` synthetic unit-count
//!   atoms appended so that a channel described by very few atoms scores
//!   low instead of uniformly high.
//!
//! All values are normalized by the log of the support size, so they lie
//! in `[0, 1]` and do not depend on the log base.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acd::RawAtomTable;
use crate::clustering::AtomCatalog;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CpeError {
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("no channel scores for layer `{0}`")]
    EmptyLayer(String),
    #[error("no layers to average")]
    NoLayers,
}

/// Label used for the `k`-th padding atom (1-based).
pub fn pad_label(k: usize) -> String {
    format!("⟨pad-{k}⟩")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogBase {
    #[default]
    Natural,
    Two,
}

impl LogBase {
    fn log<T: Scalar>(self, x: T) -> T {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Two => x.log2(),
        }
    }
}

/// `-sum p log p / log k` over `k` probabilities.
///
/// Fewer than two entries give 0. Identical probabilities give exactly 1.
pub fn normalized_entropy<T: Scalar>(probabilities: &[T]) -> T {
    normalized_entropy_in(probabilities, LogBase::Natural)
}

pub fn normalized_entropy_in<T: Scalar>(probabilities: &[T], base: LogBase) -> T {
    let k = probabilities.len();
    if k < 2 {
        return T::zero();
    }
    if probabilities.iter().all(|&p| p == probabilities[0]) {
        return T::one();
    }
    let h = probabilities
        .iter()
        .filter(|&&p| p > T::zero())
        .fold(T::zero(), |acc, &p| acc - p * base.log(p));
    let normalized = h / base.log(T::from_count(k as u64));
    normalized.max(T::zero()).min(T::one())
}

fn probabilities_from_counts<T: Scalar>(counts: &[u64], denominator: u64) -> Vec<T> {
    let d = T::from_count(denominator);
    counts.iter().map(|&c| T::from_count(c) / d).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionEntry<T> {
    pub atom: String,
    pub count: u64,
    pub probability: T,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub padding: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDistribution<T> {
    pub entries: Vec<DistributionEntry<T>>,
    pub pad: usize,
    pub denominator: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl<T: Scalar> ConceptDistribution<T> {
    pub fn probabilities(&self) -> Vec<T> {
        self.entries.iter().map(|e| e.probability).collect()
    }

    pub fn counts(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.count).collect()
    }

    /// `P* + Pad`.
    pub fn support(&self) -> usize {
        self.entries.len()
    }

    /// The same probabilities as exact fractions.
    pub fn exact_probabilities(&self) -> Vec<Ratio<u64>> {
        self.entries
            .iter()
            .map(|e| Ratio::new(e.count, self.denominator))
            .collect()
    }
}

/// Padded atom distribution of a clustered catalog.
///
/// When the catalog's slot total differs from `q * n` (a repaired
/// describer answer), the actual total is used so probabilities still sum
/// to one, and a warning is attached.
pub fn distribution<T: Scalar>(catalog: &AtomCatalog, q: usize, n: usize) -> Result<ConceptDistribution<T>, CpeError> {
    if catalog.is_empty() {
        return Err(CpeError::EmptyCatalog);
    }
    let pad = n.saturating_sub(catalog.p_star());
    let total: u64 = catalog.clusters.iter().map(|c| c.count).sum();
    let expected = (q * n) as u64;
    let warning = (total != expected).then(|| {
        let msg = format!("slot total {total} differs from Q x N = {expected}");
        log::warn!("{msg}");
        msg
    });
    let denominator = total + pad as u64;
    let d = T::from_count(denominator);

    let mut entries: Vec<DistributionEntry<T>> = catalog
        .clusters
        .iter()
        .map(|c| DistributionEntry {
            atom: c.representative.to_string(),
            count: c.count,
            probability: T::from_count(c.count) / d,
            padding: false,
        })
        .collect();
    entries.extend((1..=pad).map(|k| DistributionEntry {
        atom: pad_label(k),
        count: 1,
        probability: T::one() / d,
        padding: true,
    }));
    Ok(ConceptDistribution {
        entries,
        pad,
        denominator,
        warning,
    })
}

pub fn cpe_padded<T: Scalar>(dist: &ConceptDistribution<T>) -> T {
    normalized_entropy(&dist.probabilities())
}

pub fn cpe_padded_in<T: Scalar>(dist: &ConceptDistribution<T>, base: LogBase) -> T {
    normalized_entropy_in(&dist.probabilities(), base)
}

/// Entropy over the distinct, unclustered atoms.
pub fn cpe_naive<T: Scalar>(table: &RawAtomTable) -> T {
    let counts: Vec<u64> = table.frequency.values().copied().collect();
    normalized_entropy(&probabilities_from_counts::<T>(&counts, table.total_slots()))
}

/// Entropy over the clusters, without padding.
pub fn cpe_clustered<T: Scalar>(catalog: &AtomCatalog) -> T {
    let counts = catalog.counts();
    let total = counts.iter().sum();
    normalized_entropy(&probabilities_from_counts::<T>(&counts, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpeScore<T> {
    pub naive: T,
    pub clustered: T,
    pub padded: T,
}

/// All three entropies of one channel, plus its padded distribution.
pub fn score<T: Scalar>(
    table: &RawAtomTable,
    catalog: &AtomCatalog,
    q: usize,
    n: usize,
) -> Result<(CpeScore<T>, ConceptDistribution<T>), CpeError> {
    let dist = distribution(catalog, q, n)?;
    let score = CpeScore {
        naive: cpe_naive(table),
        clustered: cpe_clustered(catalog),
        padded: cpe_padded(&dist),
    };
    Ok((score, dist))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCpe<T> {
    pub layer: String,
    pub d_l: usize,
    /// Channels that contributed; the rest failed to be described.
    pub scored: usize,
    pub mean_h: T,
}

fn mean<T: Scalar>(values: impl Iterator<Item = T>) -> Option<T> {
    let (sum, n) = values.fold((T::zero(), 0u64), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / T::from_count(n))
}

/// Mean padded CPE over the scored channels of a layer of `d_l` channels.
pub fn layer_cpe<T: Scalar>(layer: &str, d_l: usize, scores: &[CpeScore<T>]) -> Result<LayerCpe<T>, CpeError> {
    let mean_h = mean(scores.iter().map(|s| s.padded)).ok_or_else(|| CpeError::EmptyLayer(layer.to_string()))?;
    if scores.len() < d_l {
        log::warn!("layer {layer}: {} of {d_l} channels skipped", d_l - scores.len());
    }
    Ok(LayerCpe {
        layer: layer.to_string(),
        d_l,
        scored: scores.len(),
        mean_h,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCpe<T> {
    pub num_layers: usize,
    pub mean_h: T,
}

/// Unweighted mean of the layer means.
pub fn model_cpe<T: Scalar>(layers: &[LayerCpe<T>]) -> Result<ModelCpe<T>, CpeError> {
    let mean_h = mean(layers.iter().map(|l| l.mean_h)).ok_or(CpeError::NoLayers)?;
    Ok(ModelCpe {
        num_layers: layers.len(),
        mean_h,
    })
}
