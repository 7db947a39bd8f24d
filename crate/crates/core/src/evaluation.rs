//! Scoring explanations and checking entropy against human judgment.
//!
//! Explanations are rated on Accuracy, Completeness and User
//! Interpretability, each 0, 1 or 2, either by a judge model or by human
//! raters working from static bundles (one JSON record per sample and a
//! CSV score sheet per group).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canonical;
use crate::gateway::{
    json_block, ChatRequest, Gateway, GatewayError, ImagePayload, Message, Part, RequestProfile, Task,
};
use crate::template::{self, Bindings};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("score {value} for {criterion} is outside 0..=2")]
    OutOfRange { criterion: &'static str, value: i64 },
    #[error("judge response is not a score object: {0}")]
    Unparseable(String),
    #[error("nothing to aggregate")]
    Empty,
    #[error("sample `{0}` has no explanation for method `{1}`")]
    MissingNarrative(String, String),
    #[error("image for sample `{0}` not found at {1}")]
    MissingImage(String, PathBuf),
    #[error("score sheets lack rows for samples {0:?}")]
    MissingRows(Vec<String>),
    #[error("sheet {file} row {row}: {message}")]
    Sheet { file: String, row: usize, message: String },
    #[error("pair `{0}` has {1} ratings, expected 3")]
    RatingCount(String, usize),
    #[error("cannot access {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] template::TemplateError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_error(path: &Path, e: impl ToString) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub const CRITERIA: [&str; 3] = ["accuracy", "completeness", "user_interpretability"];
pub const RATERS_PER_PAIR: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationScore {
    pub accuracy: u8,
    pub completeness: u8,
    pub user_interpretability: u8,
    pub total: u8,
    #[serde(default)]
    pub evidence: BTreeMap<String, String>,
}

fn check(criterion: &'static str, value: i64) -> Result<u8, EvalError> {
    if (0..=2).contains(&value) {
        Ok(value as u8)
    } else {
        Err(EvalError::OutOfRange { criterion, value })
    }
}

impl ExplanationScore {
    pub fn new(accuracy: i64, completeness: i64, user_interpretability: i64) -> Result<Self, EvalError> {
        let accuracy = check("accuracy", accuracy)?;
        let completeness = check("completeness", completeness)?;
        let user_interpretability = check("user_interpretability", user_interpretability)?;
        Ok(Self {
            accuracy,
            completeness,
            user_interpretability,
            total: accuracy + completeness + user_interpretability,
            evidence: BTreeMap::new(),
        })
    }
}

fn parse_judgment(text: &str) -> Result<ExplanationScore, EvalError> {
    let trimmed = text.trim();
    let body = trimmed
        .find('{')
        .zip(trimmed.rfind('}'))
        .filter(|(a, b)| a < b)
        .map(|(a, b)| &trimmed[a..=b])
        .ok_or_else(|| EvalError::Unparseable(text.to_string()))?;
    let v: Value = serde_json::from_str(body).map_err(|_| EvalError::Unparseable(text.to_string()))?;
    let mut evidence = BTreeMap::new();
    let mut scores = [0i64; 3];
    for (slot, criterion) in scores.iter_mut().zip(CRITERIA) {
        let entry = v
            .get(criterion)
            .ok_or_else(|| EvalError::Unparseable(text.to_string()))?;
        let score = match entry {
            Value::Object(_) => entry.get("score"),
            other => Some(other),
        }
        .and_then(Value::as_i64)
        .ok_or_else(|| EvalError::Unparseable(text.to_string()))?;
        *slot = score;
        if let Some(e) = entry.get("evidence").and_then(Value::as_str) {
            evidence.insert(criterion.to_string(), e.to_string());
        }
    }
    let mut score = ExplanationScore::new(scores[0], scores[1], scores[2])?;
    if let Some(stated) = v.get("total").and_then(Value::as_i64) {
        if stated != score.total as i64 {
            log::warn!("judge stated total {stated}, criterion sum is {}", score.total);
        }
    }
    score.evidence = evidence;
    Ok(score)
}

pub fn render_judge_prompt(
    image: &ImagePayload,
    prediction: &str,
    label: &str,
    narrative: &str,
    profile: &RequestProfile,
) -> Result<ChatRequest, EvalError> {
    let info = json!({"prediction": prediction, "label": label, "explanation": narrative});
    let text = template::render(
        template::JUDGE,
        &Bindings::new()
            .set("info", json_block(&info))
            .set("rubric", template::RUBRIC),
    )?;
    Ok(ChatRequest::new(
        Task::Judge,
        profile,
        vec![Message::user(vec![Part::Text(text), Part::Image(image.clone())])],
    ))
}

/// Scores one narrative. A malformed or out-of-range answer is retried
/// once before the error is returned.
pub fn judge_explanation(
    image: &ImagePayload,
    prediction: &str,
    label: &str,
    narrative: &str,
    gateway: &Gateway,
    profile: &RequestProfile,
) -> Result<ExplanationScore, EvalError> {
    let mut request = render_judge_prompt(image, prediction, label, narrative, profile)?;
    let first = gateway.complete(&request)?;
    match parse_judgment(&first.text) {
        Ok(score) => Ok(score),
        Err(e) => {
            log::warn!("judge format violation ({e}), retrying once");
            request.messages.push(Message::assistant_text(first.text));
            request.messages.push(Message::user_text(
                "Your answer does not follow the required format. Return only the JSON object with scores 0, 1 or 2.",
            ));
            parse_judgment(&gateway.complete(&request)?.text)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreAggregate {
    pub accuracy: f64,
    pub completeness: f64,
    pub user_interpretability: f64,
    pub total: f64,
    pub n_samples: usize,
}

pub fn aggregate_scores(scores: &[ExplanationScore]) -> Result<ScoreAggregate, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = scores.len() as f64;
    let mean = |f: fn(&ExplanationScore) -> u8| scores.iter().map(|s| f(s) as f64).sum::<f64>() / n;
    Ok(ScoreAggregate {
        accuracy: mean(|s| s.accuracy),
        completeness: mean(|s| s.completeness),
        user_interpretability: mean(|s| s.user_interpretability),
        total: mean(|s| s.total),
        n_samples: scores.len(),
    })
}

/// One sample to be rated by humans, with explanations keyed by method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSample {
    pub sample_id: String,
    pub image_path: PathBuf,
    pub prediction: String,
    pub label: String,
    pub explanations: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleLayout {
    pub groups: usize,
    pub raters_per_group: usize,
}

impl Default for BundleLayout {
    fn default() -> Self {
        Self {
            groups: 10,
            raters_per_group: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct BundleMapping {
    /// sample id -> alias -> method
    aliases: BTreeMap<String, BTreeMap<String, String>>,
    groups: BTreeMap<String, usize>,
    raters_per_group: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleFiles {
    pub records: Vec<PathBuf>,
    pub sheets: Vec<PathBuf>,
    pub mapping: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct SheetRow {
    group_id: usize,
    sample_id: String,
    method_alias: String,
    accuracy: Option<String>,
    completeness: Option<String>,
    user_interpretability: Option<String>,
}

fn alias_order(sample_id: &str, methods: &[&String]) -> Vec<String> {
    let seed: [u8; 32] = Sha256::digest(sample_id.as_bytes()).into();
    let mut order: Vec<String> = methods.iter().map(|m| m.to_string()).collect();
    order.shuffle(&mut ChaCha8Rng::from_seed(seed));
    order
}

/// Writes `records/<sample>.json`, `images/`, `sheets/group_XX.csv` and
/// `mapping.json`.
///
/// Methods are shuffled per sample into aliases `Ex1`, `Ex2`, ... and the
/// alias to method mapping is kept only in `mapping.json`. Samples are
/// split into contiguous groups.
pub fn export_human_bundle(
    samples: &[BundleSample],
    out_dir: &Path,
    layout: &BundleLayout,
) -> Result<BundleFiles, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let methods: BTreeSet<&String> = samples.iter().flat_map(|s| s.explanations.keys()).collect();
    let methods: Vec<&String> = methods.into_iter().collect();
    for s in samples {
        for m in &methods {
            if s.explanations.get(*m).is_none_or(|t| t.trim().is_empty()) {
                return Err(EvalError::MissingNarrative(s.sample_id.clone(), m.to_string()));
            }
        }
        if !s.image_path.is_file() {
            return Err(EvalError::MissingImage(s.sample_id.clone(), s.image_path.clone()));
        }
    }

    let records_dir = out_dir.join("records");
    let sheets_dir = out_dir.join("sheets");
    let images_dir = out_dir.join("images");
    for d in [&records_dir, &sheets_dir, &images_dir] {
        fs::create_dir_all(d).map_err(|e| io_error(d, e))?;
    }
    let groups = layout.groups.clamp(1, samples.len());
    let mut mapping = BundleMapping {
        aliases: BTreeMap::new(),
        groups: BTreeMap::new(),
        raters_per_group: layout.raters_per_group,
    };
    let mut sheets: Vec<Vec<SheetRow>> = (0..groups).map(|_| Vec::new()).collect();
    let mut records = Vec::new();

    for (i, s) in samples.iter().enumerate() {
        let group = i * groups / samples.len();
        let order = alias_order(&s.sample_id, &methods);
        let mut aliases = BTreeMap::new();
        let mut explanations = Vec::new();
        for (k, method) in order.iter().enumerate() {
            let alias = format!("Ex{}", k + 1);
            explanations.push(json!({"alias": alias, "text": s.explanations[method]}));
            sheets[group].push(SheetRow {
                group_id: group + 1,
                sample_id: s.sample_id.clone(),
                method_alias: alias.clone(),
                accuracy: None,
                completeness: None,
                user_interpretability: None,
            });
            aliases.insert(alias, method.clone());
        }
        let image = match s.image_path.extension() {
            Some(ext) => format!("images/{}.{}", s.sample_id, ext.to_string_lossy()),
            None => format!("images/{}", s.sample_id),
        };
        let image_dest = out_dir.join(&image);
        fs::copy(&s.image_path, &image_dest).map_err(|e| io_error(&image_dest, e))?;
        let record = json!({
            "sample_id": s.sample_id,
            "group_id": group + 1,
            "image": image,
            "prediction": s.prediction,
            "label": s.label,
            "explanations": explanations,
            "rubric": template::RUBRIC,
        });
        let path = records_dir.join(format!("{}.json", s.sample_id));
        fs::write(&path, canonical::to_string_pretty(&record).expect("record serializes"))
            .map_err(|e| io_error(&path, e))?;
        records.push(path);
        mapping.aliases.insert(s.sample_id.clone(), aliases);
        mapping.groups.insert(s.sample_id.clone(), group + 1);
    }

    let mut sheet_paths = Vec::new();
    for (g, rows) in sheets.iter().enumerate() {
        let path = sheets_dir.join(format!("group_{:02}.csv", g + 1));
        let mut w = csv::Writer::from_path(&path)?;
        for row in rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| io_error(&path, e))?;
        sheet_paths.push(path);
    }
    let mapping_path = out_dir.join("mapping.json");
    fs::write(
        &mapping_path,
        canonical::to_string_pretty(&mapping).expect("mapping serializes"),
    )
    .map_err(|e| io_error(&mapping_path, e))?;
    Ok(BundleFiles {
        records,
        sheets: sheet_paths,
        mapping: mapping_path,
    })
}

fn sheet_cell(file: &str, row: usize, name: &'static str, cell: &Option<String>) -> Result<i64, EvalError> {
    let sheet_err = |message: String| EvalError::Sheet {
        file: file.to_string(),
        row,
        message,
    };
    let text = cell.as_deref().map(str::trim).filter(|t| !t.is_empty());
    let text = text.ok_or_else(|| sheet_err(format!("{name} is blank")))?;
    let value: i64 = text
        .parse()
        .map_err(|_| sheet_err(format!("{name} = {text:?} is not an integer")))?;
    if !(0..=2).contains(&value) {
        return Err(sheet_err(format!("{name} = {value} is outside 0..=2")));
    }
    Ok(value)
}

/// Reads filled score sheets and returns scores per method, ordered by
/// sample id, then sheet order.
pub fn import_human_scores(
    mapping_path: &Path,
    sheets: &[PathBuf],
) -> Result<BTreeMap<String, Vec<ExplanationScore>>, EvalError> {
    let text = fs::read_to_string(mapping_path).map_err(|e| io_error(mapping_path, e))?;
    let mapping: BundleMapping = serde_json::from_str(&text).map_err(|e| io_error(mapping_path, e))?;

    let mut by_sample: BTreeMap<String, Vec<(String, ExplanationScore)>> = BTreeMap::new();
    let mut seen: HashMap<(String, String), usize> = HashMap::new();
    for sheet in sheets {
        let file = sheet.display().to_string();
        let mut reader = csv::Reader::from_path(sheet)?;
        for (i, row) in reader.deserialize::<SheetRow>().enumerate() {
            let row = row?;
            let line = i + 2;
            let method = mapping
                .aliases
                .get(&row.sample_id)
                .and_then(|a| a.get(&row.method_alias))
                .ok_or_else(|| EvalError::Sheet {
                    file: file.clone(),
                    row: line,
                    message: format!("unknown sample/alias {}/{}", row.sample_id, row.method_alias),
                })?;
            let score = ExplanationScore::new(
                sheet_cell(&file, line, "accuracy", &row.accuracy)?,
                sheet_cell(&file, line, "completeness", &row.completeness)?,
                sheet_cell(&file, line, "user_interpretability", &row.user_interpretability)?,
            )?;
            *seen
                .entry((row.sample_id.clone(), row.method_alias.clone()))
                .or_default() += 1;
            by_sample
                .entry(row.sample_id)
                .or_default()
                .push((method.clone(), score));
        }
    }

    let missing: Vec<String> = mapping
        .aliases
        .iter()
        .filter(|(sample, aliases)| {
            aliases
                .keys()
                .any(|a| !seen.contains_key(&((*sample).clone(), a.clone())))
        })
        .map(|(sample, _)| sample.clone())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingRows(missing));
    }

    let mut out: BTreeMap<String, Vec<ExplanationScore>> = BTreeMap::new();
    for (_, rows) in by_sample {
        for (method, score) in rows {
            out.entry(method).or_default().push(score);
        }
    }
    Ok(out)
}

/// Reference to a concept by layer and channel, written `layer:channel`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptRef {
    pub layer: String,
    pub channel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairJudgment {
    pub pair_id: String,
    pub upper: ConceptRef,
    pub lower: ConceptRef,
    pub human_scores: Vec<f64>,
    pub cpe_upper: f64,
    pub cpe_lower: f64,
    pub verdict_human: bool,
    pub verdict_cpe: bool,
}

impl PairJudgment {
    /// Humans find the upper concept more polysemantic when their mean
    /// score exceeds 1; the metric does when its CPE is strictly higher.
    pub fn new(
        pair_id: impl Into<String>,
        upper: ConceptRef,
        lower: ConceptRef,
        human_scores: Vec<f64>,
        cpe_upper: f64,
        cpe_lower: f64,
    ) -> Result<Self, EvalError> {
        let pair_id = pair_id.into();
        if human_scores.len() != RATERS_PER_PAIR {
            return Err(EvalError::RatingCount(pair_id, human_scores.len()));
        }
        let mean = human_scores.iter().sum::<f64>() / RATERS_PER_PAIR as f64;
        Ok(Self {
            pair_id,
            upper,
            lower,
            verdict_human: mean > 1.0,
            verdict_cpe: cpe_upper > cpe_lower,
            human_scores,
            cpe_upper,
            cpe_lower,
        })
    }

    pub fn agrees(&self) -> bool {
        self.verdict_human == self.verdict_cpe
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub n_pairs: usize,
    pub agreements: usize,
    pub rate: f64,
}

pub fn cpe_human_consistency(pairs: &[PairJudgment]) -> Result<ConsistencyReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(p) = pairs.iter().find(|p| p.human_scores.len() != RATERS_PER_PAIR) {
        return Err(EvalError::RatingCount(p.pair_id.clone(), p.human_scores.len()));
    }
    let agreements = pairs.iter().filter(|p| p.agrees()).count();
    Ok(ConsistencyReport {
        n_pairs: pairs.len(),
        agreements,
        rate: agreements as f64 / pairs.len() as f64,
    })
}

/// A prediction outcome used by [`stratified_sample`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub sample_id: String,
    pub label: String,
    pub prediction: String,
}

impl Outcome {
    pub fn is_correct(&self) -> bool {
        crate::gateway::mock::same_class(&self.label, &self.prediction)
    }
}

/// Draws `n` samples with `correct_share` of them correctly predicted,
/// uniformly within each outcome group. Returns ids in input order.
pub fn stratified_sample(
    outcomes: &[Outcome],
    n: usize,
    correct_share: f64,
    seed: u64,
) -> Result<Vec<String>, EvalError> {
    let (correct, wrong): (Vec<&Outcome>, Vec<&Outcome>) = outcomes.iter().partition(|o| o.is_correct());
    let want_correct = ((n as f64) * correct_share).round() as usize;
    let take_correct = want_correct.min(correct.len());
    let take_wrong = (n - take_correct).min(wrong.len());
    let take_correct = (n - take_wrong).min(correct.len());
    if take_correct + take_wrong == 0 {
        return Err(EvalError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: BTreeSet<&str> = BTreeSet::new();
    chosen.extend(
        correct
            .choose_multiple(&mut rng, take_correct)
            .map(|o| o.sample_id.as_str()),
    );
    chosen.extend(
        wrong
            .choose_multiple(&mut rng, take_wrong)
            .map(|o| o.sample_id.as_str()),
    );
    Ok(outcomes
        .iter()
        .filter(|o| chosen.contains(o.sample_id.as_str()))
        .map(|o| o.sample_id.clone())
        .collect())
}
