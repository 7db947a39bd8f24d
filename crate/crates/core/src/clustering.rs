//! Entailment-based merging of semantically equivalent atoms.
//!
//! Atoms are visited in first-occurrence order. Each one joins the
//! earliest cluster whose representative it merges with, otherwise it
//! founds a new cluster and becomes its representative. Only
//! representatives are compared, which keeps the pass well defined even
//! though real entailment is not transitive.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::acd::{normalize_atom, AcdError, Atom, RawAtomTable};
use crate::gateway::{
    json_block, ChatRequest, Gateway, GatewayError, Message, RequestProfile, Task, Transport, TransportError,
};
use crate::template::{self, Bindings};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("nli endpoint: {0}")]
    Nli(#[from] TransportError),
    #[error("unrecognized entailment label {0:?}")]
    Label(String),
    #[error("synonym file line {line}: {source}")]
    Synonyms { line: usize, source: AcdError },
    #[error("cannot read synonym file: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Template(#[from] template::TemplateError),
    #[error("verdict table has no entry for ({0}, {1})")]
    MissingVerdict(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Entail,
    Neutral,
    Contradict,
}

impl Verdict {
    pub fn value(self) -> i8 {
        match self {
            Verdict::Entail => 1,
            Verdict::Neutral => 0,
            Verdict::Contradict => -1,
        }
    }

    /// Parses `entailment` / `neutral` / `contradiction` (and short forms).
    pub fn from_label(label: &str) -> Result<Self, ClusterError> {
        let l = label.trim().trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
        match l.as_str() {
            "entailment" | "entail" | "entails" | "1" => Ok(Verdict::Entail),
            "neutral" | "0" => Ok(Verdict::Neutral),
            "contradiction" | "contradict" | "contradicts" | "-1" => Ok(Verdict::Contradict),
            _ => Err(ClusterError::Label(label.to_string())),
        }
    }
}

/// Directional entailment judgment: does `premise` entail `hypothesis`?
pub trait Entailment: Send + Sync {
    fn judge(&self, premise: &Atom, hypothesis: &Atom) -> Result<Verdict, ClusterError>;
}

/// Reflexive pairs short-circuit to [`Verdict::Entail`] without asking the backend.
pub fn entail(premise: &Atom, hypothesis: &Atom, backend: &dyn Entailment) -> Result<Verdict, ClusterError> {
    if premise == hypothesis {
        return Ok(Verdict::Entail);
    }
    backend.judge(premise, hypothesis)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergePolicy {
    /// Merge only when both directions entail.
    #[default]
    Strict,
    /// Merge unless either direction contradicts.
    Lenient,
}

impl std::str::FromStr for MergePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict" => Ok(Self::Strict),
            "lenient" | "paper-literal" => Ok(Self::Lenient),
            other => Err(format!("unknown merge policy {other:?}")),
        }
    }
}

pub fn merge_decision(a: &Atom, b: &Atom, policy: MergePolicy, backend: &dyn Entailment) -> Result<bool, ClusterError> {
    let forward = entail(a, b, backend)?;
    match policy {
        MergePolicy::Strict => Ok(forward == Verdict::Entail && entail(b, a, backend)? == Verdict::Entail),
        MergePolicy::Lenient => Ok(forward != Verdict::Contradict && entail(b, a, backend)? != Verdict::Contradict),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomCluster {
    pub representative: Atom,
    pub members: Vec<Atom>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomCatalog {
    pub clusters: Vec<AtomCluster>,
    pub total_raw: u64,
}

impl AtomCatalog {
    /// Catalog with one singleton cluster per distinct atom.
    pub fn unclustered(table: &RawAtomTable) -> Self {
        Self {
            clusters: table
                .frequency
                .iter()
                .map(|(atom, &count)| AtomCluster {
                    representative: atom.clone(),
                    members: vec![atom.clone()],
                    count,
                })
                .collect(),
            total_raw: table.total_slots(),
        }
    }

    pub fn p_star(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn representatives(&self) -> impl Iterator<Item = &Atom> {
        self.clusters.iter().map(|c| &c.representative)
    }

    pub fn counts(&self) -> Vec<u64> {
        self.clusters.iter().map(|c| c.count).collect()
    }
}

pub fn cluster(
    table: &RawAtomTable,
    policy: MergePolicy,
    backend: &dyn Entailment,
) -> Result<AtomCatalog, ClusterError> {
    let mut clusters: Vec<AtomCluster> = Vec::new();
    for (atom, &count) in &table.frequency {
        let mut joined = false;
        for c in clusters.iter_mut() {
            if merge_decision(&c.representative, atom, policy, backend)? {
                c.members.push(atom.clone());
                c.count += count;
                joined = true;
                break;
            }
        }
        if !joined {
            clusters.push(AtomCluster {
                representative: atom.clone(),
                members: vec![atom.clone()],
                count,
            });
        }
    }
    Ok(AtomCatalog {
        clusters,
        total_raw: table.total_slots(),
    })
}

/// Synonym-table oracle.
///
/// The file holds one equivalence group per line, members separated by
/// commas. A line starting with `!` lists atoms that contradict each
/// other. `#` starts a comment. Two atoms entail each other when they are
/// equal or share a group. Otherwise the premise entails the hypothesis
/// when every hypothesis word, mapped through single-word groups, occurs
/// in the premise.
#[derive(Debug, Clone, Default)]
pub struct LexicalOracle {
    group_of: HashMap<Atom, usize>,
    contradictions: HashSet<(usize, usize)>,
    groups: usize,
}

impl LexicalOracle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ClusterError> {
        let mut oracle = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (negated, body) = match line.strip_prefix('!') {
                Some(rest) => (true, rest),
                None => (false, line),
            };
            let atoms = body
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(normalize_atom)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|source| ClusterError::Synonyms { line: i + 1, source })?;
            if negated {
                oracle.add_contradiction(&atoms);
            } else {
                oracle.add_group(&atoms);
            }
        }
        Ok(oracle)
    }

    pub fn from_file(path: &Path) -> Result<Self, ClusterError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn group_id(&mut self, atom: &Atom) -> usize {
        if let Some(&g) = self.group_of.get(atom) {
            return g;
        }
        let g = self.groups;
        self.groups += 1;
        self.group_of.insert(atom.clone(), g);
        g
    }

    pub fn add_group(&mut self, atoms: &[Atom]) {
        let Some(first) = atoms.first() else { return };
        let g = self.group_id(first);
        for a in &atoms[1..] {
            self.group_of.insert(a.clone(), g);
        }
    }

    pub fn add_contradiction(&mut self, atoms: &[Atom]) {
        let ids: Vec<usize> = atoms.iter().map(|a| self.group_id(a)).collect();
        for &x in &ids {
            for &y in &ids {
                if x != y {
                    self.contradictions.insert((x, y));
                }
            }
        }
    }

    pub fn with_group(mut self, atoms: &[&str]) -> Self {
        let atoms: Vec<Atom> = atoms.iter().map(|s| normalize_atom(s).expect("valid atom")).collect();
        self.add_group(&atoms);
        self
    }

    fn word_key(&self, word: &str) -> String {
        Atom::new(word)
            .ok()
            .and_then(|a| self.group_of.get(&a))
            .map(|g| format!("#{g}"))
            .unwrap_or_else(|| word.to_string())
    }
}

impl Entailment for LexicalOracle {
    fn judge(&self, premise: &Atom, hypothesis: &Atom) -> Result<Verdict, ClusterError> {
        if premise == hypothesis {
            return Ok(Verdict::Entail);
        }
        let gp = self.group_of.get(premise);
        let gh = self.group_of.get(hypothesis);
        if let (Some(&x), Some(&y)) = (gp, gh) {
            if x == y {
                return Ok(Verdict::Entail);
            }
            if self.contradictions.contains(&(x, y)) {
                return Ok(Verdict::Contradict);
            }
        }
        let premise_words: HashSet<String> = premise.words().map(|w| self.word_key(w)).collect();
        let covered = hypothesis.words().all(|w| premise_words.contains(&self.word_key(w)));
        Ok(if covered { Verdict::Entail } else { Verdict::Neutral })
    }
}

/// Fixed verdict table, mainly for tests and audits. Unlisted pairs are
/// `Neutral` unless the table is strict.
#[derive(Debug, Clone, Default)]
pub struct VerdictTable {
    verdicts: HashMap<(Atom, Atom), Verdict>,
    strict: bool,
}

impl VerdictTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn strict(mut self) -> Self {
        self.strict = true;
        self
    }

    pub fn insert(&mut self, premise: &Atom, hypothesis: &Atom, verdict: Verdict) {
        self.verdicts.insert((premise.clone(), hypothesis.clone()), verdict);
    }
}

impl Entailment for VerdictTable {
    fn judge(&self, premise: &Atom, hypothesis: &Atom) -> Result<Verdict, ClusterError> {
        match self.verdicts.get(&(premise.clone(), hypothesis.clone())) {
            Some(v) => Ok(*v),
            None if self.strict => Err(ClusterError::MissingVerdict(
                premise.to_string(),
                hypothesis.to_string(),
            )),
            None => Ok(Verdict::Neutral),
        }
    }
}

/// Remote NLI service: POST `{premise, hypothesis}`, answer `{label}`.
pub struct NliEndpoint {
    url: String,
    transport: Arc<dyn Transport>,
}

impl NliEndpoint {
    pub fn new(url: impl Into<String>, transport: Arc<dyn Transport>) -> Self {
        Self {
            url: url.into(),
            transport,
        }
    }
}

impl Entailment for NliEndpoint {
    fn judge(&self, premise: &Atom, hypothesis: &Atom) -> Result<Verdict, ClusterError> {
        let body = json!({"premise": premise.as_str(), "hypothesis": hypothesis.as_str()});
        let answer = self.transport.post_json(&self.url, &[], &body)?;
        let label = answer
            .get("label")
            .and_then(Value::as_str)
            .ok_or_else(|| ClusterError::Label(answer.to_string()))?;
        Verdict::from_label(label)
    }
}

/// Language model asked through the gateway for a one-word label.
pub struct LlmEntailment {
    gateway: Arc<Gateway>,
    profile: RequestProfile,
}

impl LlmEntailment {
    pub fn new(gateway: Arc<Gateway>, profile: RequestProfile) -> Self {
        Self { gateway, profile }
    }
}

impl Entailment for LlmEntailment {
    fn judge(&self, premise: &Atom, hypothesis: &Atom) -> Result<Verdict, ClusterError> {
        let info = json!({"premise": premise.as_str(), "hypothesis": hypothesis.as_str()});
        let text = template::render(template::ENTAIL, &Bindings::new().set("info", json_block(&info)))?;
        let request = ChatRequest::new(Task::Entail, &self.profile, vec![Message::user_text(text)]);
        let response = self.gateway.complete(&request)?;
        let word = response.text.split_whitespace().next().unwrap_or_default();
        Verdict::from_label(word)
    }
}
