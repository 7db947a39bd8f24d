//! The global concept explanation database.
//!
//! One record per channel: its patches, the described atom table, the
//! clustered catalog with probabilities, the padded distribution and the
//! three entropy values. Records are stored as line-delimited canonical
//! JSON sorted by `(stage_order, channel)`, so the file is identical no
//! matter in which order channels finished.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acd::{self, Atom, PatchAtoms, RawAtomTable};
use crate::canonical;
use crate::clustering::{self, AtomCatalog, AtomCluster, Entailment, MergePolicy};
use crate::cpe::{self, CpeScore, DistributionEntry, LayerCpe, ModelCpe};
use crate::gateway::{Gateway, RequestProfile, Task};
use crate::manifest::ConceptManifest;

#[derive(Debug, Error)]
pub enum DatabaseError {
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("database is empty")]
    Empty,
    #[error("manifest has no concepts")]
    EmptyManifest,
    #[error("every channel failed; first failure: {0}")]
    AllFailed(String),
    #[error("channel {layer}:{channel} failed to be described: {reason}")]
    FailedChannel {
        layer: String,
        channel: usize,
        reason: String,
    },
    #[error(transparent)]
    Cpe(#[from] cpe::CpeError),
    #[error("cannot build worker pool: {0}")]
    Pool(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum DescribeStatus {
    Ok,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub representative: Atom,
    pub members: Vec<Atom>,
    pub count: u64,
    /// Padded probability of the cluster.
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcdRecord {
    pub layer: String,
    pub stage_order: i64,
    pub channel: usize,
    pub patches: Vec<String>,
    pub patch_atoms: Vec<Vec<Atom>>,
    pub catalog: Vec<CatalogEntry>,
    pub distribution: Vec<DistributionEntry<f64>>,
    pub pad: usize,
    pub cpe: Option<CpeScore<f64>>,
    pub describe_status: DescribeStatus,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub repairs: Vec<String>,
}

impl AcdRecord {
    pub fn is_ok(&self) -> bool {
        self.describe_status == DescribeStatus::Ok
    }

    pub fn key(&self) -> (i64, usize) {
        (self.stage_order, self.channel)
    }

    pub fn catalog_ref(&self) -> String {
        format!("{}:{}", self.layer, self.channel)
    }

    /// Rebuilds the clustered catalog, `None` for failed channels.
    pub fn atom_catalog(&self) -> Option<AtomCatalog> {
        if !self.is_ok() || self.catalog.is_empty() {
            return None;
        }
        Some(AtomCatalog {
            clusters: self
                .catalog
                .iter()
                .map(|e| AtomCluster {
                    representative: e.representative.clone(),
                    members: e.members.clone(),
                    count: e.count,
                })
                .collect(),
            total_raw: self.catalog.iter().map(|e| e.count).sum(),
        })
    }

    pub fn raw_table(&self) -> RawAtomTable {
        RawAtomTable::from_patches(
            self.patch_atoms
                .iter()
                .enumerate()
                .map(|(i, atoms)| PatchAtoms {
                    patch_index: i,
                    atoms: atoms.clone(),
                })
                .collect(),
        )
    }

    fn failed(layer: &str, stage_order: i64, channel: usize, patches: Vec<String>, reason: String) -> Self {
        Self {
            layer: layer.to_string(),
            stage_order,
            channel,
            patches,
            patch_atoms: Vec::new(),
            catalog: Vec::new(),
            distribution: Vec::new(),
            pad: 0,
            cpe: None,
            describe_status: DescribeStatus::Failed { reason },
            repairs: Vec::new(),
        }
    }
}

/// Assembles a record from a described table and its clustered catalog.
#[allow(clippy::too_many_arguments)]
pub fn make_record(
    layer: &str,
    stage_order: i64,
    channel: usize,
    patches: Vec<String>,
    table: &RawAtomTable,
    catalog: &AtomCatalog,
    atoms_per_patch: usize,
    n_patches: usize,
    repairs: Vec<String>,
) -> Result<AcdRecord, cpe::CpeError> {
    let (score, dist) = cpe::score::<f64>(table, catalog, atoms_per_patch, n_patches)?;
    let mut repairs = repairs;
    repairs.extend(dist.warning.clone());
    let entries = catalog
        .clusters
        .iter()
        .zip(&dist.entries)
        .map(|(c, e)| CatalogEntry {
            representative: c.representative.clone(),
            members: c.members.clone(),
            count: c.count,
            probability: e.probability,
        })
        .collect();
    Ok(AcdRecord {
        layer: layer.to_string(),
        stage_order,
        channel,
        patches,
        patch_atoms: table.per_patch.iter().map(|p| p.atoms.clone()).collect(),
        catalog: entries,
        pad: dist.pad,
        distribution: dist.entries,
        cpe: Some(score),
        describe_status: DescribeStatus::Ok,
        repairs,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AcdDatabase {
    records: Vec<AcdRecord>,
}

impl AcdDatabase {
    pub fn new(mut records: Vec<AcdRecord>) -> Self {
        records.sort_by(|a, b| a.key().cmp(&b.key()).then_with(|| a.layer.cmp(&b.layer)));
        Self { records }
    }

    pub fn records(&self) -> &[AcdRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, layer: &str, channel: usize) -> Option<&AcdRecord> {
        self.records.iter().find(|r| r.layer == layer && r.channel == channel)
    }

    /// `(layer, stage_order, d_l)` in stage order.
    pub fn layers(&self) -> Vec<(String, i64, usize)> {
        let mut layers: BTreeMap<(i64, String), usize> = BTreeMap::new();
        for r in &self.records {
            *layers.entry((r.stage_order, r.layer.clone())).or_default() += 1;
        }
        layers.into_iter().map(|((s, l), d)| (l, s, d)).collect()
    }

    pub fn stage_of(&self, layer: &str) -> Option<i64> {
        self.records.iter().find(|r| r.layer == layer).map(|r| r.stage_order)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&canonical::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), DatabaseError> {
        let io = |source| DatabaseError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut file = fs::File::create(path).map_err(io)?;
        file.write_all(self.to_jsonl().as_bytes()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, DatabaseError> {
        let io = |source| DatabaseError::Io {
            path: path.display().to_string(),
            source,
        };
        let reader = BufReader::new(fs::File::open(path).map_err(io)?);
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|source| DatabaseError::Parse { line: i + 1, source })?);
        }
        if records.is_empty() {
            return Err(DatabaseError::Empty);
        }
        Ok(Self::new(records))
    }
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub atoms_per_patch: usize,
    pub policy: MergePolicy,
    pub parallel: usize,
    pub describe_profile: RequestProfile,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            atoms_per_patch: acd::DEFAULT_ATOMS_PER_PATCH,
            policy: MergePolicy::Strict,
            parallel: 1,
            describe_profile: RequestProfile::default_for(Task::Describe),
        }
    }
}

/// Describes, clusters and scores every channel of the manifest.
///
/// Channels that fail are kept with a failed status. The build only
/// errors when no channel succeeds.
pub fn build_acd(
    manifest: &ConceptManifest,
    describer: &Gateway,
    entailment: &dyn Entailment,
    options: &BuildOptions,
) -> Result<AcdDatabase, DatabaseError> {
    if manifest.concepts.is_empty() {
        return Err(DatabaseError::EmptyManifest);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.parallel.max(1))
        .build()
        .map_err(|e| DatabaseError::Pool(e.to_string()))?;
    let stage: BTreeMap<&str, i64> = manifest
        .layers
        .iter()
        .map(|l| (l.name.as_str(), l.stage_order))
        .collect();

    let records: Vec<AcdRecord> = pool.install(|| {
        manifest
            .concepts
            .par_iter()
            .map(|concept| {
                let stage_order = stage[concept.layer.as_str()];
                let patches: Vec<String> = concept.patches.iter().map(|p| p.image_path.clone()).collect();
                let outcome = acd::describe_manifest_concept(
                    manifest,
                    concept,
                    describer,
                    options.atoms_per_patch,
                    &options.describe_profile,
                )
                .map_err(|e| e.to_string())
                .and_then(|d| {
                    let catalog =
                        clustering::cluster(&d.table, options.policy, entailment).map_err(|e| e.to_string())?;
                    make_record(
                        &concept.layer,
                        stage_order,
                        concept.channel_index,
                        patches.clone(),
                        &d.table,
                        &catalog,
                        options.atoms_per_patch,
                        manifest.n_patches,
                        d.repairs,
                    )
                    .map_err(|e| e.to_string())
                });
                outcome.unwrap_or_else(|reason| {
                    log::warn!("{}:{} failed: {reason}", concept.layer, concept.channel_index);
                    AcdRecord::failed(&concept.layer, stage_order, concept.channel_index, patches, reason)
                })
            })
            .collect()
    });

    if let Some(first) = records.iter().find_map(|r| match &r.describe_status {
        DescribeStatus::Failed { reason } => Some(reason.clone()),
        DescribeStatus::Ok => None,
    }) {
        if records.iter().all(|r| !r.is_ok()) {
            return Err(DatabaseError::AllFailed(first));
        }
    }
    Ok(AcdDatabase::new(records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FailedChannels {
    /// Leave failed channels out of layer means.
    #[default]
    Skip,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelCpe {
    pub layer: String,
    pub stage_order: i64,
    pub channel: usize,
    pub naive: f64,
    pub clustered: f64,
    pub padded: f64,
}

/// Per-channel scores, highest padded CPE first.
pub fn channel_report(db: &AcdDatabase) -> Vec<ChannelCpe> {
    let mut rows: Vec<ChannelCpe> = db
        .records()
        .iter()
        .filter_map(|r| {
            r.cpe.map(|s| ChannelCpe {
                layer: r.layer.clone(),
                stage_order: r.stage_order,
                channel: r.channel,
                naive: s.naive,
                clustered: s.clustered,
                padded: s.padded,
            })
        })
        .collect();
    rows.sort_by(|a, b| {
        b.padded
            .total_cmp(&a.padded)
            .then(a.stage_order.cmp(&b.stage_order))
            .then(a.channel.cmp(&b.channel))
    });
    rows
}

pub fn layer_report(db: &AcdDatabase, failed: FailedChannels) -> Result<Vec<LayerCpe<f64>>, DatabaseError> {
    if db.is_empty() {
        return Err(DatabaseError::Empty);
    }
    db.layers()
        .into_iter()
        .map(|(layer, _, d_l)| {
            let mut scores = Vec::with_capacity(d_l);
            for r in db.records().iter().filter(|r| r.layer == layer) {
                match (&r.cpe, &r.describe_status) {
                    (Some(s), DescribeStatus::Ok) => scores.push(*s),
                    (_, DescribeStatus::Failed { reason }) if failed == FailedChannels::Fail => {
                        return Err(DatabaseError::FailedChannel {
                            layer: r.layer.clone(),
                            channel: r.channel,
                            reason: reason.clone(),
                        })
                    }
                    _ => {}
                }
            }
            Ok(cpe::layer_cpe(&layer, d_l, &scores)?)
        })
        .collect()
}

pub fn model_report(db: &AcdDatabase, failed: FailedChannels) -> Result<ModelCpe<f64>, DatabaseError> {
    Ok(cpe::model_cpe(&layer_report(db, failed)?)?)
}

pub fn channel_csv(rows: &[ChannelCpe]) -> Result<String, DatabaseError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(CsvChannel {
            layer: &row.layer,
            channel: row.channel,
            naive: canonical::round_significant(row.naive),
            clustered: canonical::round_significant(row.clustered),
            padded: canonical::round_significant(row.padded),
        })?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("csv is utf-8"))
}

pub fn layer_csv(rows: &[LayerCpe<f64>]) -> Result<String, DatabaseError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "d_l", "scored", "mean_h"])?;
    for row in rows {
        w.write_record([
            row.layer.clone(),
            row.d_l.to_string(),
            row.scored.to_string(),
            canonical::round_significant(row.mean_h).to_string(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("csv is utf-8"))
}

#[derive(Serialize)]
struct CsvChannel<'a> {
    layer: &'a str,
    channel: usize,
    naive: f64,
    clustered: f64,
    padded: f64,
}
