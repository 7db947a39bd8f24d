//! Local explanation chains.
//!
//! For one input, each key layer contributes the channels whose relevance
//! exceeds `alpha * max`. Every selected channel is explained by the one
//! atom of its catalog that best fits the image caption, and the chain of
//! atoms is handed to a language model that writes the final narrative.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::acd::{normalize_atom, Atom};
use crate::canonical;
use crate::clustering::AtomCatalog;
use crate::database::AcdDatabase;
use crate::gateway::{
    json_block, ChatRequest, Gateway, GatewayError, ImagePayload, Message, Part, RequestProfile, Task,
};
use crate::manifest::SampleRelevance;
use crate::scalar::Scalar;
use crate::template::{self, Bindings};

pub const DEFAULT_ALPHA: f64 = 0.001;

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("relevance vector is empty")]
    EmptyVector,
    #[error("alpha must lie in (0, 1), got {0}")]
    Alpha(f64),
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("layer `{0}` is not in the database")]
    UnknownLayer(String),
    #[error("no usable catalog for selected channel {layer}:{channel}")]
    MissingCatalog { layer: String, channel: usize },
    #[error("no caption for sample `{0}` and no captioner configured")]
    MissingCaption(String),
    #[error("synthesizer returned an empty narrative")]
    EmptyNarrative,
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] template::TemplateError),
}

/// Channels selected from one relevance vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection<T> {
    /// `(channel, value)`, highest value first, ties by channel.
    pub picks: Vec<(usize, T)>,
    /// No value cleared the threshold and the top entry was taken instead.
    pub fallback: bool,
}

impl<T> Selection<T> {
    pub fn indices(&self) -> Vec<usize> {
        self.picks.iter().map(|(i, _)| *i).collect()
    }
}

/// Keeps every `v_j > alpha * max(v)`, sorted by value descending.
///
/// When `max(v) <= 0` nothing can clear the threshold and the single
/// largest entry is returned with `fallback` set. NaN entries are never
/// selected.
pub fn select_top_concepts<T: Scalar>(values: &[T], alpha: T) -> Result<Selection<T>, ChainError> {
    if !(alpha > T::zero() && alpha < T::one()) {
        return Err(ChainError::Alpha(alpha.to_f64_lossy()));
    }
    let (top_index, max) = values
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, v)| !v.is_nan())
        .fold(None, |best: Option<(usize, T)>, (i, v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((i, v)),
        })
        .ok_or(ChainError::EmptyVector)?;

    let sort =
        |picks: &mut Vec<(usize, T)>| picks.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("no NaN").then(a.0.cmp(&b.0)));
    if max > T::zero() {
        let threshold = alpha * max;
        let mut picks: Vec<(usize, T)> = values
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, v)| *v > threshold)
            .collect();
        if !picks.is_empty() {
            sort(&mut picks);
            return Ok(Selection { picks, fallback: false });
        }
    }
    Ok(Selection {
        picks: vec![(top_index, max)],
        fallback: true,
    })
}

fn tokens(text: &str) -> BTreeSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Offline filter rule: the candidate with the most words present in the
/// caption, ties broken by higher probability then alphabetical order.
pub fn rule_choice(candidates: &[(String, f64)], caption: &str) -> Option<usize> {
    let caption_tokens = tokens(caption);
    let overlap = |atom: &str| tokens(atom).iter().filter(|t| caption_tokens.contains(*t)).count();
    (0..candidates.len()).min_by(|&a, &b| {
        let (ta, pa) = &candidates[a];
        let (tb, pb) = &candidates[b];
        overlap(tb).cmp(&overlap(ta)).then(pb.total_cmp(pa)).then(ta.cmp(tb))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    /// Ask a language model through the gateway.
    Llm,
    /// Apply [`rule_choice`] locally.
    #[default]
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptionSource {
    ProvidedFile,
    CaptionerBackend,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub source: CaptionSource,
}

impl Caption {
    pub fn provided(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            source: CaptionSource::ProvidedFile,
        }
    }
}

fn candidates(catalog: &AtomCatalog) -> Vec<(String, f64)> {
    let total = catalog.total_raw.max(1) as f64;
    catalog
        .clusters
        .iter()
        .map(|c| (c.representative.to_string(), c.count as f64 / total))
        .collect()
}

/// Where and how atoms are filtered.
#[derive(Debug, Clone, Copy)]
pub struct FilterSettings<'a> {
    pub mode: FilterMode,
    pub gateway: Option<&'a Gateway>,
    pub profile: &'a RequestProfile,
}

/// Picks the catalog representative that best explains the channel for
/// this caption. LLM answers that are not one of the representatives are
/// retried once, then the offline rule decides.
pub fn filter_atom(catalog: &AtomCatalog, caption: &Caption, settings: FilterSettings<'_>) -> Result<Atom, ChainError> {
    if catalog.is_empty() {
        return Err(ChainError::EmptyCatalog);
    }
    if catalog.p_star() == 1 {
        return Ok(catalog.clusters[0].representative.clone());
    }
    let cands = candidates(catalog);
    let by_rule = || {
        let i = rule_choice(&cands, &caption.text).expect("non-empty catalog");
        catalog.clusters[i].representative.clone()
    };
    let gateway = match (settings.mode, settings.gateway) {
        (FilterMode::Llm, Some(g)) => g,
        _ => return Ok(by_rule()),
    };

    let info = json!({
        "caption": caption.text,
        "candidates": cands.iter().map(|(a, p)| json!({"atom": a, "probability": canonical::round_significant(*p)})).collect::<Vec<_>>(),
    });
    let text = template::render(template::FILTER, &Bindings::new().set("info", json_block(&info)))?;
    let mut request = ChatRequest::new(Task::Filter, settings.profile, vec![Message::user_text(text)]);
    for attempt in 0..2 {
        let response = gateway.complete(&request)?;
        if let Ok(answer) = normalize_atom(&response.text) {
            if let Some(c) = catalog.clusters.iter().find(|c| c.representative == answer) {
                return Ok(c.representative.clone());
            }
        }
        if attempt == 0 {
            log::warn!("filter answered off-list atom {:?}, retrying", response.text);
            request.messages.push(Message::assistant_text(response.text));
            request.messages.push(Message::user_text(
                "That is not one of the listed candidate atoms. Answer with exactly one listed atom.",
            ));
        }
    }
    log::warn!("filter answered off-list twice, using the offline rule");
    Ok(by_rule())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedConcept {
    pub channel: usize,
    pub relevance: f64,
    pub atom: Atom,
    pub catalog_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitNode {
    pub layer: String,
    pub k_l: usize,
    pub selected: Vec<SelectedConcept>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationChain {
    pub sample_id: String,
    pub image_path: String,
    pub label: String,
    pub prediction: String,
    pub caption: Caption,
    pub nodes: Vec<CircuitNode>,
    pub narrative: Option<String>,
}

impl ExplanationChain {
    pub fn to_canonical_json(&self) -> String {
        canonical::to_string_pretty(self).expect("chain serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ChainError> {
        let text = std::fs::read_to_string(path).map_err(|e| ChainError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| ChainError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Selects, filters and orders the circuit nodes of one sample, bottom-up.
pub fn build_chain(
    sample: &SampleRelevance,
    db: &AcdDatabase,
    alpha: f64,
    caption: &Caption,
    filter: FilterSettings<'_>,
) -> Result<ExplanationChain, ChainError> {
    let mut layers: Vec<(i64, &String, &Vec<f64>)> = sample
        .per_layer_values
        .iter()
        .map(|(layer, values)| {
            db.stage_of(layer)
                .map(|s| (s, layer, values))
                .ok_or_else(|| ChainError::UnknownLayer(layer.clone()))
        })
        .collect::<Result<_, _>>()?;
    layers.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

    let mut nodes = Vec::with_capacity(layers.len());
    for (_, layer, values) in layers {
        let selection = select_top_concepts(values, alpha)?;
        let catalogs = selection
            .picks
            .iter()
            .map(|&(channel, relevance)| {
                let record = db.get(layer, channel).ok_or_else(|| ChainError::MissingCatalog {
                    layer: layer.clone(),
                    channel,
                })?;
                let catalog = record.atom_catalog().ok_or_else(|| ChainError::MissingCatalog {
                    layer: layer.clone(),
                    channel,
                })?;
                Ok((channel, relevance, record.catalog_ref(), catalog))
            })
            .collect::<Result<Vec<_>, ChainError>>()?;
        let selected = catalogs
            .into_par_iter()
            .map(|(channel, relevance, catalog_ref, catalog)| {
                Ok(SelectedConcept {
                    channel,
                    relevance,
                    atom: filter_atom(&catalog, caption, filter)?,
                    catalog_ref,
                })
            })
            .collect::<Result<Vec<_>, ChainError>>()?;
        nodes.push(CircuitNode {
            layer: layer.clone(),
            k_l: selected.len(),
            selected,
            fallback: selection.fallback,
        });
    }
    Ok(ExplanationChain {
        sample_id: sample.sample_id.clone(),
        image_path: sample.image_path.clone(),
        label: sample.label.clone(),
        prediction: sample.prediction.clone(),
        caption: caption.clone(),
        nodes,
        narrative: None,
    })
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// The explanation prompt for a built chain.
pub fn render_explain_prompt(chain: &ExplanationChain, profile: &RequestProfile) -> Result<ChatRequest, ChainError> {
    let path: Vec<_> = chain
        .nodes
        .iter()
        .map(|n| {
            json!({
                "layer": n.layer,
                "concepts": n.selected.iter().map(|s| json!({
                    "channel": s.channel,
                    "atom": s.atom.as_str(),
                    "relevance": round4(s.relevance),
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    let info = json!({
        "prediction": chain.prediction,
        "label": chain.label,
        "caption": chain.caption.text,
        "decision_path": path,
    });
    let text = template::render(template::EXPLAIN, &Bindings::new().set("info", json_block(&info)))?;
    Ok(ChatRequest::new(
        Task::Synthesize,
        profile,
        vec![Message::user_text(text)],
    ))
}

pub fn synthesize(
    mut chain: ExplanationChain,
    gateway: &Gateway,
    profile: &RequestProfile,
) -> Result<ExplanationChain, ChainError> {
    let request = render_explain_prompt(&chain, profile)?;
    let narrative = gateway.complete(&request)?.text.trim().to_string();
    if narrative.is_empty() {
        return Err(ChainError::EmptyNarrative);
    }
    chain.narrative = Some(narrative);
    Ok(chain)
}

/// Whether a narrative opens by judging the prediction.
pub fn states_correctness(narrative: &str) -> Option<bool> {
    let first = narrative.split('.').next()?.to_lowercase();
    if first.contains("incorrect") || first.contains("not correct") {
        Some(false)
    } else if first.contains("correct") {
        Some(true)
    } else {
        None
    }
}

/// Sidecar file mapping sample ids to captions.
pub fn load_captions(path: &Path) -> Result<BTreeMap<String, String>, ChainError> {
    let io = |message: String| ChainError::Io {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| io(e.to_string()))
}

/// Caption from the sidecar map, else from a captioner backend.
pub fn resolve_caption(
    sample_id: &str,
    provided: Option<&BTreeMap<String, String>>,
    captioner: Option<(&Gateway, &RequestProfile, &ImagePayload)>,
) -> Result<Caption, ChainError> {
    if let Some(text) = provided.and_then(|m| m.get(sample_id)).filter(|t| !t.trim().is_empty()) {
        return Ok(Caption::provided(text.clone()));
    }
    let (gateway, profile, image) = captioner.ok_or_else(|| ChainError::MissingCaption(sample_id.to_string()))?;
    let request = ChatRequest::new(
        Task::Caption,
        profile,
        vec![Message::user(vec![
            Part::Text(template::CAPTION.trim().to_string()),
            Part::Image(image.clone()),
        ])],
    );
    let text = gateway.complete(&request)?.text.trim().to_string();
    Ok(Caption {
        text,
        source: CaptionSource::CaptionerBackend,
    })
}
