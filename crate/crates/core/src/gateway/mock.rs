//! Offline backend whose answers are a pure function of the request.
//!
//! The default responders read the structured ```json block that every
//! pipeline prompt carries and answer the way a well-behaved model would.
//! Describer requests are answered per image: a `text/plain` payload is
//! read as a comma separated list of atoms (fixtures use this to script
//! exact atom tables), any other payload gets atoms picked from a fixed
//! vocabulary by its content hash.

use std::collections::HashMap;
use std::sync::Arc;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use super::{extract_json_block, ChatRequest, GatewayError, ImagePayload, Task};

pub type Responder = Arc<dyn Fn(&ChatRequest) -> Result<String, String> + Send + Sync>;

const VOCABULARY: &[&str] = &[
    "red color",
    "blue color",
    "green color",
    "yellow color",
    "black stripes",
    "white spots",
    "fur texture",
    "feather texture",
    "metal surface",
    "wood grain",
    "water surface",
    "grass field",
    "sky background",
    "round shape",
    "sharp edges",
    "dog face",
    "bird wing",
    "fish scales",
    "car wheel",
    "net mesh",
    "human hand",
    "text characters",
    "brick wall",
    "leaf pattern",
    "bright light",
    "dark shadow",
    "glass reflection",
    "curved line",
    "small object",
    "large animal",
];

#[derive(Clone)]
pub struct MockBackend {
    responders: HashMap<Task, Responder>,
}

impl std::fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut tasks: Vec<_> = self.responders.keys().collect();
        tasks.sort();
        f.debug_struct("MockBackend").field("tasks", &tasks).finish()
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        let mut responders: HashMap<Task, Responder> = HashMap::new();
        responders.insert(Task::Describe, Arc::new(describe));
        responders.insert(Task::Entail, Arc::new(entail));
        responders.insert(Task::Filter, Arc::new(filter));
        responders.insert(Task::Synthesize, Arc::new(synthesize));
        responders.insert(Task::Judge, Arc::new(judge));
        responders.insert(Task::Caption, Arc::new(|_: &ChatRequest| Ok("an image".to_string())));
        Self { responders }
    }
}

impl MockBackend {
    pub fn empty() -> Self {
        Self {
            responders: HashMap::new(),
        }
    }

    pub fn with_responder<F>(mut self, task: Task, f: F) -> Self
    where
        F: Fn(&ChatRequest) -> Result<String, String> + Send + Sync + 'static,
    {
        self.responders.insert(task, Arc::new(f));
        self
    }

    pub fn respond(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let responder = self
            .responders
            .get(&request.task)
            .ok_or(GatewayError::NoMockResponder(request.task))?;
        responder(request).map_err(GatewayError::Mock)
    }
}

fn info(request: &ChatRequest) -> Result<Value, String> {
    extract_json_block(&request.last_user_text()).ok_or_else(|| "prompt has no json block".to_string())
}

fn str_field<'a>(v: &'a Value, key: &str) -> &'a str {
    v.get(key).and_then(Value::as_str).unwrap_or_default()
}

/// Atoms the mock describer reports for one image.
pub fn scripted_atoms(image: &ImagePayload) -> Vec<String> {
    if image.media_type == "text/plain" {
        if let Ok(text) = std::str::from_utf8(&image.data) {
            let text = text.trim();
            let text = text.strip_prefix("atoms:").unwrap_or(text);
            return text
                .split([',', '\n'])
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
        }
    }
    let digest = Sha256::digest(&image.data);
    digest[..3]
        .iter()
        .map(|b| VOCABULARY[*b as usize % VOCABULARY.len()].to_string())
        .collect()
}

fn describe(request: &ChatRequest) -> Result<String, String> {
    let mut out = Map::new();
    let images = request.messages.iter().flat_map(|m| m.images());
    for (i, image) in images.enumerate() {
        out.insert((i + 1).to_string(), json!(scripted_atoms(image)));
    }
    if out.is_empty() {
        return Err("describe request without images".into());
    }
    Ok(Value::Object(out).to_string())
}

fn entail(request: &ChatRequest) -> Result<String, String> {
    let v = info(request)?;
    let premise = str_field(&v, "premise").trim().to_lowercase();
    let hypothesis = str_field(&v, "hypothesis").trim().to_lowercase();
    Ok(if premise == hypothesis { "entailment" } else { "neutral" }.into())
}

fn filter(request: &ChatRequest) -> Result<String, String> {
    let v = info(request)?;
    let caption = str_field(&v, "caption");
    let candidates: Vec<(String, f64)> = v
        .get("candidates")
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
        .map(|c| {
            (
                str_field(c, "atom").to_string(),
                c.get("probability").and_then(Value::as_f64).unwrap_or(0.0),
            )
        })
        .collect();
    let best = crate::chain::rule_choice(&candidates, caption).ok_or("no candidates")?;
    Ok(candidates[best].0.clone())
}

/// Mock notion of semantic equivalence between a prediction and a label.
pub fn same_class(a: &str, b: &str) -> bool {
    let norm = |s: &str| {
        s.to_lowercase()
            .replace(['_', '-'], " ")
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
    };
    norm(a) == norm(b)
}

fn synthesize(request: &ChatRequest) -> Result<String, String> {
    let v = info(request)?;
    let prediction = str_field(&v, "prediction");
    let label = str_field(&v, "label");
    let caption = str_field(&v, "caption");
    let path = v
        .get("decision_path")
        .and_then(Value::as_array)
        .ok_or("no decision path")?;

    let correct = same_class(prediction, label);
    let mut text = if correct {
        format!("The prediction is correct. The model predicted \"{prediction}\" and the label is \"{label}\".")
    } else {
        format!("The prediction is incorrect. The model predicted \"{prediction}\" while the label is \"{label}\".")
    };
    text.push_str(&format!(" The image shows {caption}."));
    let mut last_top = None;
    for node in path {
        let layer = str_field(node, "layer");
        let concepts: Vec<String> = node
            .get("concepts")
            .and_then(Value::as_array)
            .into_iter()
            .flatten()
            .map(|c| {
                format!(
                    "\"{}\" (relevance {})",
                    str_field(c, "atom"),
                    c.get("relevance").and_then(Value::as_f64).unwrap_or(0.0)
                )
            })
            .collect();
        if let Some(first) = node.pointer("/concepts/0/atom").and_then(Value::as_str) {
            last_top = Some(first.to_string());
        }
        text.push_str(&format!(
            " In layer {layer} the model responds to {}.",
            concepts.join(", ")
        ));
    }
    let top = last_top.unwrap_or_default();
    if correct {
        text.push_str(&format!(
            " These concepts build up to \"{top}\" in the deepest layer, which matches a {label}, so the model correctly predicts {prediction}."
        ));
    } else {
        text.push_str(&format!(
            " The strongest concept in the deepest layer, \"{top}\", pulls the decision toward {prediction} instead of {label}, which explains the error."
        ));
    }
    Ok(text)
}

fn judge(request: &ChatRequest) -> Result<String, String> {
    let v = info(request)?;
    let explanation = str_field(&v, "explanation");
    let prediction = str_field(&v, "prediction").to_lowercase();
    let lower = explanation.to_lowercase();

    let accuracy = if !prediction.is_empty() && lower.contains(&prediction) {
        2
    } else {
        1
    };
    let layers = lower.matches("layer").count();
    let completeness = match layers {
        0 => 0,
        1 => 1,
        _ => 2,
    };
    let sentences = explanation.split('.').filter(|s| !s.trim().is_empty()).count().max(1);
    let words = explanation.split_whitespace().count();
    let interpretability = if words / sentences <= 30 { 2 } else { 1 };
    Ok(json!({
        "accuracy": {"evidence": format!("prediction mentioned: {}", accuracy == 2), "score": accuracy},
        "completeness": {"evidence": format!("{layers} layer references"), "score": completeness},
        "user_interpretability": {"evidence": format!("{} words per sentence", words / sentences), "score": interpretability},
        "total": accuracy + completeness + interpretability,
    })
    .to_string())
}
