//! Describing visual concepts as linguistic concept atoms.
//!
//! The describer sees all `N` patches of a channel and returns `Q` short
//! atoms per patch. Those `N x Q` slots are normalized and tallied into a
//! [`RawAtomTable`], the input to clustering and to the naive entropy.

use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{
    ChatRequest, ChatResponse, Gateway, GatewayError, ImagePayload, Message, Part, RequestProfile, Task,
};
use crate::manifest::{ConceptManifest, VisualConcept};
use crate::template::{self, Bindings};

pub const DEFAULT_ATOMS_PER_PATCH: usize = 3;
pub const MAX_ATOM_WORDS: usize = 3;

#[derive(Debug, Error)]
pub enum AcdError {
    #[error("atom is empty after normalization: {0:?}")]
    EmptyAtom(String),
    #[error("concept has no patches")]
    NoPatches,
    #[error("cannot read patch image {path}: {source}")]
    UnreadableImage { path: String, source: std::io::Error },
    #[error("describer response is not a JSON object: {0}")]
    Unparseable(String),
    #[error("describer response lacks patches {0:?}")]
    MissingPatches(Vec<usize>),
    #[error("no usable atom for patch {0}")]
    NoAtoms(usize),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] template::TemplateError),
}

/// A normalized concept atom of at most three words.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Atom(String);

impl Atom {
    pub fn new(raw: &str) -> Result<Self, AcdError> {
        normalize_atom(raw)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.0.split(' ')
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for Atom {
    type Error = AcdError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        normalize_atom(&value)
    }
}

impl From<Atom> for String {
    fn from(atom: Atom) -> Self {
        atom.0
    }
}

fn strip_edges(s: &str) -> &str {
    s.trim_matches(|c: char| !c.is_alphanumeric())
}

/// Lowercases, strips surrounding punctuation, collapses whitespace and
/// keeps at most three words.
pub fn normalize_atom(raw: &str) -> Result<Atom, AcdError> {
    let mut current = raw.to_lowercase();
    loop {
        let next = strip_edges(&current)
            .split_whitespace()
            .take(MAX_ATOM_WORDS)
            .collect::<Vec<_>>()
            .join(" ");
        let next = strip_edges(&next).to_string();
        if next == current {
            break;
        }
        current = next;
    }
    if current.is_empty() {
        return Err(AcdError::EmptyAtom(raw.to_string()));
    }
    Ok(Atom(current))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchAtoms {
    pub patch_index: usize,
    pub atoms: Vec<Atom>,
}

/// The `N x Q` description slots of one concept and their tallies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawAtomTable {
    pub per_patch: Vec<PatchAtoms>,
    /// Occurrence count per distinct atom, in first-occurrence order.
    pub frequency: IndexMap<Atom, u64>,
}

impl RawAtomTable {
    pub fn from_patches(per_patch: Vec<PatchAtoms>) -> Self {
        let mut frequency = IndexMap::new();
        for atom in per_patch.iter().flat_map(|p| &p.atoms) {
            *frequency.entry(atom.clone()).or_insert(0) += 1;
        }
        Self { per_patch, frequency }
    }

    /// Builds a table straight from counts, one slot list per atom.
    pub fn from_counts<'a>(counts: impl IntoIterator<Item = (&'a str, u64)>) -> Result<Self, AcdError> {
        let mut frequency = IndexMap::new();
        for (raw, count) in counts {
            *frequency.entry(normalize_atom(raw)?).or_insert(0) += count;
        }
        let per_patch = frequency
            .iter()
            .flat_map(|(atom, &count)| std::iter::repeat_n(atom.clone(), count as usize))
            .enumerate()
            .map(|(i, atom)| PatchAtoms {
                patch_index: i,
                atoms: vec![atom],
            })
            .collect();
        Ok(Self { per_patch, frequency })
    }

    pub fn unique_atoms(&self) -> impl Iterator<Item = &Atom> {
        self.frequency.keys()
    }

    pub fn p(&self) -> usize {
        self.frequency.len()
    }

    pub fn total_slots(&self) -> u64 {
        self.frequency.values().sum()
    }
}

/// Builds the commonality-description request for one concept.
pub fn render_describe_prompt(
    concept: &VisualConcept,
    patches: &[ImagePayload],
    atoms_per_patch: usize,
    profile: &RequestProfile,
) -> Result<ChatRequest, AcdError> {
    if concept.patches.is_empty() || patches.is_empty() {
        return Err(AcdError::NoPatches);
    }
    let bindings = Bindings::new()
        .set("num_images", patches.len().to_string())
        .set("num_atoms", atoms_per_patch.to_string());
    let text = template::render(template::DESCRIBE, &bindings)?;
    let mut parts = Vec::with_capacity(patches.len() + 1);
    parts.push(Part::Text(text));
    parts.extend(patches.iter().cloned().map(Part::Image));
    Ok(ChatRequest::new(Task::Describe, profile, vec![Message::user(parts)]))
}

fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.split_once('\n').map(|(_, body)| body).unwrap_or("");
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

fn parse_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    let try_parse = |s: &str| match serde_json::from_str::<Value>(s) {
        Ok(Value::Object(map)) => Some(map),
        _ => None,
    };
    try_parse(text.trim())
        .or_else(|| try_parse(strip_fences(text)))
        .or_else(|| {
            let start = text.find('{')?;
            let end = text.rfind('}')?;
            (start < end).then(|| try_parse(&text[start..=end])).flatten()
        })
}

/// Result of [`parse_atoms`] plus the repairs that were applied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedAtoms {
    pub patches: Vec<PatchAtoms>,
    pub repairs: Vec<String>,
}

/// Parses the describer's JSON into exactly `n` patches of exactly `q`
/// atoms. Keys are 1-based image indices (0-based is accepted when a `"0"`
/// key is present). Short lists are padded with their first atom, long
/// ones truncated.
pub fn parse_atoms(text: &str, n: usize, q: usize) -> Result<ParsedAtoms, AcdError> {
    let object = parse_object(text).ok_or_else(|| AcdError::Unparseable(text.chars().take(200).collect()))?;
    let offset = if object.contains_key("0") { 0 } else { 1 };
    let mut repairs = Vec::new();
    let mut patches = Vec::with_capacity(n);
    let mut missing = Vec::new();

    for index in 0..n {
        let Some(value) = object.get(&(index + offset).to_string()) else {
            missing.push(index);
            continue;
        };
        let raw: Vec<&str> = match value {
            Value::Array(items) => items.iter().filter_map(Value::as_str).collect(),
            Value::String(s) => s.split(',').collect(),
            _ => Vec::new(),
        };
        let mut atoms: Vec<Atom> = raw.iter().filter_map(|r| normalize_atom(r).ok()).collect();
        if atoms.len() < raw.len() {
            repairs.push(format!(
                "patch {index}: dropped {} empty atoms",
                raw.len() - atoms.len()
            ));
        }
        if atoms.is_empty() {
            return Err(AcdError::NoAtoms(index));
        }
        if atoms.len() > q {
            repairs.push(format!("patch {index}: truncated {} atoms to {q}", atoms.len()));
            atoms.truncate(q);
        }
        if atoms.len() < q {
            repairs.push(format!("patch {index}: padded {} atoms to {q}", atoms.len()));
            let first = atoms[0].clone();
            atoms.resize(q, first);
        }
        patches.push(PatchAtoms {
            patch_index: index,
            atoms,
        });
    }
    if !missing.is_empty() {
        return Err(AcdError::MissingPatches(missing));
    }
    let extra = object
        .keys()
        .filter(|k| k.parse::<usize>().map_or(true, |i| i < offset || i >= n + offset))
        .count();
    if extra > 0 {
        repairs.push(format!("ignored {extra} keys outside the image range"));
    }
    for r in &repairs {
        log::warn!("describer output repaired: {r}");
    }
    Ok(ParsedAtoms { patches, repairs })
}

/// Outcome of describing one concept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Description {
    pub table: RawAtomTable,
    pub repairs: Vec<String>,
}

pub fn load_patch_images(manifest: &ConceptManifest, concept: &VisualConcept) -> Result<Vec<ImagePayload>, AcdError> {
    concept
        .patches
        .iter()
        .map(|p| {
            let path = manifest.patch_path(p);
            ImagePayload::from_file(&path).map_err(|source| AcdError::UnreadableImage {
                path: path.display().to_string(),
                source,
            })
        })
        .collect()
}

/// Render, complete, parse and tally. A response that omits patches is
/// re-queried once with a follow-up message.
pub fn describe_concept(
    concept: &VisualConcept,
    images: &[ImagePayload],
    gateway: &Gateway,
    atoms_per_patch: usize,
    profile: &RequestProfile,
) -> Result<Description, AcdError> {
    let n = images.len();
    let mut request = render_describe_prompt(concept, images, atoms_per_patch, profile)?;
    let response: ChatResponse = gateway.complete(&request)?;
    let parsed = match parse_atoms(&response.text, n, atoms_per_patch) {
        Err(AcdError::MissingPatches(missing)) => {
            log::warn!(
                "describer omitted patches {missing:?} for {}:{}, re-querying",
                concept.layer,
                concept.channel_index
            );
            let listed: Vec<String> = missing.iter().map(|i| (i + 1).to_string()).collect();
            request.messages.push(Message::assistant_text(response.text));
            request.messages.push(Message::user_text(format!(
                "Your answer has no entry for images {}. Answer again with a JSON object covering all {n} images.",
                listed.join(", ")
            )));
            let retry = gateway.complete(&request)?;
            let mut parsed = parse_atoms(&retry.text, n, atoms_per_patch)?;
            parsed
                .repairs
                .insert(0, format!("re-queried for missing patches {missing:?}"));
            parsed
        }
        other => other?,
    };
    Ok(Description {
        table: RawAtomTable::from_patches(parsed.patches),
        repairs: parsed.repairs,
    })
}

/// Helper for [`describe_concept`] that reads the patch images first.
pub fn describe_manifest_concept(
    manifest: &ConceptManifest,
    concept: &VisualConcept,
    gateway: &Gateway,
    atoms_per_patch: usize,
    profile: &RequestProfile,
) -> Result<Description, AcdError> {
    let images = load_patch_images(manifest, concept)?;
    describe_concept(concept, &images, gateway, atoms_per_patch, profile)
}

pub fn image_payload(path: &Path) -> Result<ImagePayload, AcdError> {
    ImagePayload::from_file(path).map_err(|source| AcdError::UnreadableImage {
        path: path.display().to_string(),
        source,
    })
}
