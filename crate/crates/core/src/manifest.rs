//! Visual concept manifests and per-sample relevance vectors.
//!
//! A manifest is a single JSON document that lists, for every channel of
//! every explained layer, the `N` image patches that drive that channel
//! hardest. Patch images live next to the document and are referenced by
//! relative path; only their existence is checked here.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("manifest has no layers")]
    NoLayers,
    #[error("layer `{0}` has dimension 0")]
    ZeroDimension(String),
    #[error("layer name `{0}` is declared twice")]
    DuplicateLayer(String),
    #[error("stage_order values must be unique and contiguous from 0, got {0:?}")]
    StageOrder(Vec<i64>),
    #[error("n_patches must be at least 1")]
    ZeroPatches,
    #[error("concept refers to unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("channel {channel} out of range for layer `{layer}` with dimension {dimension}")]
    ChannelOutOfRange {
        layer: String,
        channel: usize,
        dimension: usize,
    },
    #[error("duplicate concept for ({layer}, {channel})")]
    DuplicateConcept { layer: String, channel: usize },
    #[error("no concept for ({layer}, {channel})")]
    MissingConcept { layer: String, channel: usize },
    #[error("patch count mismatch for ({layer}, {channel}): expected {expected}, found {found}")]
    PatchCount {
        layer: String,
        channel: usize,
        expected: usize,
        found: usize,
    },
    #[error("patch file {0} does not exist")]
    MissingPatchFile(PathBuf),
    #[error("patch `{0}` has a region with non-positive size")]
    BadRegion(String),
    #[error("relevance file names layer `{0}` absent from the manifest")]
    RelevanceUnknownLayer(String),
    #[error("relevance vector for `{layer}` has length {found}, expected {expected}")]
    RelevanceLength {
        layer: String,
        expected: usize,
        found: usize,
    },
    #[error("relevance file has no vector for layer `{0}`")]
    RelevanceMissingLayer(String),
}

/// Rectangle in pixels marking the highlighted area of a patch image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRef {
    pub patch_id: String,
    pub image_path: String,
    pub source_image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualConcept {
    pub layer: String,
    pub channel_index: usize,
    pub patches: Vec<PatchRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub stage_order: i64,
    pub dimension: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum XaiMethod {
    Relevance,
    Activation,
    MutualInformation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptManifest {
    pub model_id: String,
    pub dataset_id: String,
    pub xai_method: XaiMethod,
    pub n_patches: usize,
    pub layers: Vec<LayerSpec>,
    pub concepts: Vec<VisualConcept>,
    /// Directory patch paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl ConceptManifest {
    /// Parses and validates a manifest document without touching the filesystem.
    pub fn from_json(text: &str, root: impl Into<PathBuf>) -> Result<Self, ManifestError> {
        let mut manifest: ConceptManifest = serde_json::from_str(text).map_err(|source| ManifestError::Parse {
            path: PathBuf::from("<memory>"),
            source,
        })?;
        manifest.root = root.into();
        manifest.validate_structure()?;
        Ok(manifest)
    }

    fn validate_structure(&self) -> Result<(), ManifestError> {
        if self.layers.is_empty() {
            return Err(ManifestError::NoLayers);
        }
        if self.n_patches == 0 {
            return Err(ManifestError::ZeroPatches);
        }
        let mut names = BTreeSet::new();
        for layer in &self.layers {
            if layer.dimension == 0 {
                return Err(ManifestError::ZeroDimension(layer.name.clone()));
            }
            if !names.insert(layer.name.as_str()) {
                return Err(ManifestError::DuplicateLayer(layer.name.clone()));
            }
        }
        let mut stages: Vec<i64> = self.layers.iter().map(|l| l.stage_order).collect();
        stages.sort_unstable();
        if stages.iter().enumerate().any(|(i, &s)| s != i as i64) {
            return Err(ManifestError::StageOrder(stages));
        }

        let dims: HashMap<&str, usize> = self.layers.iter().map(|l| (l.name.as_str(), l.dimension)).collect();
        let mut seen = BTreeSet::new();
        for concept in &self.concepts {
            let dimension = *dims
                .get(concept.layer.as_str())
                .ok_or_else(|| ManifestError::UnknownLayer(concept.layer.clone()))?;
            if concept.channel_index >= dimension {
                return Err(ManifestError::ChannelOutOfRange {
                    layer: concept.layer.clone(),
                    channel: concept.channel_index,
                    dimension,
                });
            }
            if !seen.insert((concept.layer.as_str(), concept.channel_index)) {
                return Err(ManifestError::DuplicateConcept {
                    layer: concept.layer.clone(),
                    channel: concept.channel_index,
                });
            }
            if concept.patches.len() != self.n_patches {
                return Err(ManifestError::PatchCount {
                    layer: concept.layer.clone(),
                    channel: concept.channel_index,
                    expected: self.n_patches,
                    found: concept.patches.len(),
                });
            }
            for patch in &concept.patches {
                if let Some(r) = patch.region {
                    if r.w <= 0 || r.h <= 0 {
                        return Err(ManifestError::BadRegion(patch.patch_id.clone()));
                    }
                }
            }
        }
        for layer in &self.layers {
            for channel in 0..layer.dimension {
                if !seen.contains(&(layer.name.as_str(), channel)) {
                    return Err(ManifestError::MissingConcept {
                        layer: layer.name.clone(),
                        channel,
                    });
                }
            }
        }
        Ok(())
    }

    fn validate_files(&self) -> Result<(), ManifestError> {
        for patch in self.concepts.iter().flat_map(|c| &c.patches) {
            let path = self.root.join(&patch.image_path);
            if !path.is_file() {
                return Err(ManifestError::MissingPatchFile(path));
            }
        }
        Ok(())
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Layers in bottom-up order.
    pub fn layers_by_stage(&self) -> Vec<&LayerSpec> {
        let mut layers: Vec<_> = self.layers.iter().collect();
        layers.sort_by_key(|l| l.stage_order);
        layers
    }

    /// The channel to concept mapping.
    pub fn concept_index(&self) -> BTreeMap<(&str, usize), &VisualConcept> {
        self.concepts
            .iter()
            .map(|c| ((c.layer.as_str(), c.channel_index), c))
            .collect()
    }

    pub fn patch_path(&self, patch: &PatchRef) -> PathBuf {
        self.root.join(&patch.image_path)
    }

    pub fn to_canonical_json(&self) -> String {
        canonical::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Loads a manifest and checks every invariant, including that each patch
/// file exists under the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<ConceptManifest, ManifestError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = ConceptManifest::from_json(&text, root).map_err(|e| match e {
        ManifestError::Parse { source, .. } => ManifestError::Parse {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })?;
    manifest.validate_files()?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRelevance {
    pub sample_id: String,
    pub image_path: String,
    pub label: String,
    pub prediction: String,
    pub per_layer_values: BTreeMap<String, Vec<f64>>,
}

impl SampleRelevance {
    pub fn validate(&self, manifest: &ConceptManifest) -> Result<(), ManifestError> {
        for (layer, values) in &self.per_layer_values {
            let spec = manifest
                .layer(layer)
                .ok_or_else(|| ManifestError::RelevanceUnknownLayer(layer.clone()))?;
            if values.len() != spec.dimension {
                return Err(ManifestError::RelevanceLength {
                    layer: layer.clone(),
                    expected: spec.dimension,
                    found: values.len(),
                });
            }
        }
        for spec in &manifest.layers {
            if !self.per_layer_values.contains_key(&spec.name) {
                return Err(ManifestError::RelevanceMissingLayer(spec.name.clone()));
            }
        }
        Ok(())
    }

    pub fn to_canonical_json(&self) -> String {
        canonical::to_string_pretty(self).expect("relevance serializes")
    }
}

pub fn load_relevance(path: impl AsRef<Path>, manifest: &ConceptManifest) -> Result<SampleRelevance, ManifestError> {
    let sample = read_relevance(path)?;
    sample.validate(manifest)?;
    Ok(sample)
}

/// Reads a relevance document without checking it against a manifest.
pub fn read_relevance(path: impl AsRef<Path>) -> Result<SampleRelevance, ManifestError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ManifestError::Parse {
        path: path.to_path_buf(),
        source,
    })
}
