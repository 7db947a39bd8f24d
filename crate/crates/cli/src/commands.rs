use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use coe_core::acd::image_payload;
use coe_core::canonical;
use coe_core::chain::{self, FilterMode, FilterSettings};
use coe_core::database::{self, AcdDatabase, BuildOptions};
use coe_core::evaluation::{self, BundleLayout, BundleSample, ConceptRef, ExplanationScore, Outcome, PairJudgment};
use coe_core::gateway::Task;
use coe_core::manifest::{self, load_manifest};
use serde::{Deserialize, Serialize};

use crate::config::{BackendKind, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpeLevel {
    Channel,
    Layer,
    Model,
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pretty<T: Serialize>(value: &T) -> Result<String> {
    Ok(canonical::to_string_pretty(value)?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Resolves `path` against the directory of `anchor` unless it is absolute.
fn beside(anchor: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        anchor.parent().unwrap_or(Path::new(".")).join(p)
    }
}

pub fn build_acd(config: &RunConfig, manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    if let Some(n) = config.n_patches {
        if n != manifest.n_patches {
            bail!(
                "config expects {n} patches per concept, manifest has {}",
                manifest.n_patches
            );
        }
    }
    let describer = config
        .gateway("describer", config.backends.describer)?
        .context("a describer backend is required")?;
    let entailment = config.entailment()?;
    let options = BuildOptions {
        atoms_per_patch: config.atoms_per_patch,
        policy: config.merge_policy()?,
        parallel: config.parallel,
        describe_profile: config.profile(Task::Describe),
    };
    let db = database::build_acd(&manifest, &describer, entailment.as_ref(), &options)?;
    let failed = db.records().iter().filter(|r| !r.is_ok()).count();
    emit(Some(out), &db.to_jsonl())?;
    eprintln!("wrote {} records ({failed} failed) to {}", db.len(), out.display());
    Ok(())
}

pub fn cpe(config: &RunConfig, db_path: &Path, level: CpeLevel, csv: bool, out: Option<&Path>) -> Result<()> {
    let db = AcdDatabase::load(db_path)?;
    let failed = db.records().iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        log::warn!("{failed} channels failed to be described");
    }
    let text = match level {
        CpeLevel::Channel => {
            let rows = database::channel_report(&db);
            if csv {
                database::channel_csv(&rows)?
            } else {
                pretty(&rows)?
            }
        }
        CpeLevel::Layer => {
            let rows = database::layer_report(&db, config.failed_channels())?;
            if csv {
                database::layer_csv(&rows)?
            } else {
                pretty(&rows)?
            }
        }
        CpeLevel::Model => {
            let model = database::model_report(&db, config.failed_channels())?;
            if csv {
                format!(
                    "num_layers,mean_h\n{},{}\n",
                    model.num_layers,
                    canonical::round_significant(model.mean_h)
                )
            } else {
                pretty(&model)?
            }
        }
    };
    emit(out, &text)
}

pub fn explain(
    config: &RunConfig,
    db_path: &Path,
    relevance_path: &Path,
    captions: Option<&Path>,
    manifest_path: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let db = AcdDatabase::load(db_path)?;
    let sample = match manifest_path {
        Some(m) => manifest::load_relevance(relevance_path, &load_manifest(m)?)?,
        None => manifest::read_relevance(relevance_path)?,
    };
    let provided = captions.map(chain::load_captions).transpose()?;
    let captioner = config.gateway("captioner", config.backends.captioner)?;
    let caption_profile = config.profile(Task::Caption);
    let image;
    let captioner_args = match &captioner {
        Some(g) => {
            image = image_payload(&beside(relevance_path, &sample.image_path))?;
            Some((g, &caption_profile, &image))
        }
        None => None,
    };
    let caption = chain::resolve_caption(&sample.sample_id, provided.as_ref(), captioner_args)?;

    let filter_gateway = match config.backends.filter {
        BackendKind::Mock | BackendKind::None => None,
        kind => config.gateway("filter", kind)?,
    };
    let filter_profile = config.profile(Task::Filter);
    let settings = FilterSettings {
        mode: if filter_gateway.is_some() {
            FilterMode::Llm
        } else {
            FilterMode::Mock
        },
        gateway: filter_gateway.as_ref(),
        profile: &filter_profile,
    };
    let built = chain::build_chain(&sample, &db, config.alpha, &caption, settings)?;
    let synthesizer = config
        .gateway("synthesizer", config.backends.synthesizer)?
        .context("a synthesizer backend is required")?;
    let explained = chain::synthesize(built, &synthesizer, &config.profile(Task::Synthesize))?;
    emit(out, &explained.to_canonical_json())
}

#[derive(Serialize)]
struct ScoredSample {
    sample_id: String,
    #[serde(flatten)]
    score: ExplanationScore,
}

#[derive(Serialize)]
struct JudgeReport {
    scores: Vec<ScoredSample>,
    aggregate: evaluation::ScoreAggregate,
}

pub fn judge(config: &RunConfig, chains: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let gateway = config
        .gateway("judge", config.backends.judge)?
        .context("a judge backend is required")?;
    let profile = config.profile(Task::Judge);
    let mut scores = Vec::with_capacity(chains.len());
    for path in chains {
        let chain = chain::ExplanationChain::load(path)?;
        let narrative = chain
            .narrative
            .as_deref()
            .with_context(|| format!("{} has no narrative", path.display()))?;
        let image = image_payload(&beside(path, &chain.image_path))?;
        let score =
            evaluation::judge_explanation(&image, &chain.prediction, &chain.label, narrative, &gateway, &profile)
                .with_context(|| format!("judging {}", path.display()))?;
        scores.push(ScoredSample {
            sample_id: chain.sample_id,
            score,
        });
    }
    let plain: Vec<ExplanationScore> = scores.iter().map(|s| s.score.clone()).collect();
    let aggregate = evaluation::aggregate_scores(&plain)?;
    emit(out, &pretty(&JudgeReport { scores, aggregate })?)
}

pub fn export(samples_path: &Path, groups: usize, out: &Path) -> Result<()> {
    let mut samples: Vec<BundleSample> = read_json(samples_path)?;
    for s in &mut samples {
        s.image_path = beside(samples_path, &s.image_path.to_string_lossy());
    }
    let layout = BundleLayout {
        groups,
        ..BundleLayout::default()
    };
    let files = evaluation::export_human_bundle(&samples, out, &layout)?;
    eprintln!(
        "wrote {} records and {} sheets to {}",
        files.records.len(),
        files.sheets.len(),
        out.display()
    );
    Ok(())
}

pub fn import(mapping: &Path, sheets: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let by_method = evaluation::import_human_scores(mapping, sheets)?;
    let report = by_method
        .iter()
        .map(|(method, scores)| Ok((method.clone(), evaluation::aggregate_scores(scores)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    emit(out, &pretty(&report)?)
}

#[derive(Deserialize)]
struct PairInput {
    pair_id: String,
    upper: ConceptRef,
    lower: ConceptRef,
    human_scores: Vec<f64>,
    cpe_upper: Option<f64>,
    cpe_lower: Option<f64>,
}

#[derive(Serialize)]
struct ConsistencyOutput {
    report: evaluation::ConsistencyReport,
    pairs: Vec<PairJudgment>,
}

pub fn consistency(pairs_path: &Path, db_path: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let inputs: Vec<PairInput> = read_json(pairs_path)?;
    let db = db_path.map(AcdDatabase::load).transpose()?;
    let lookup = |given: Option<f64>, c: &ConceptRef| -> Result<f64> {
        if let Some(v) = given {
            return Ok(v);
        }
        let db = db
            .as_ref()
            .context("pair lacks an entropy value and no --db was given")?;
        db.get(&c.layer, c.channel)
            .and_then(|r| r.cpe)
            .map(|s| s.padded)
            .with_context(|| format!("no entropy for {}:{}", c.layer, c.channel))
    };
    let pairs = inputs
        .into_iter()
        .map(|p| {
            let upper = lookup(p.cpe_upper, &p.upper)?;
            let lower = lookup(p.cpe_lower, &p.lower)?;
            Ok(PairJudgment::new(
                p.pair_id,
                p.upper,
                p.lower,
                p.human_scores,
                upper,
                lower,
            )?)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluation::cpe_human_consistency(&pairs)?;
    emit(out, &pretty(&ConsistencyOutput { report, pairs })?)
}

pub fn sample(outcomes: &Path, n: usize, correct_share: f64, seed: u64, out: Option<&Path>) -> Result<()> {
    if !(0.0..=1.0).contains(&correct_share) {
        bail!("correct share must lie in [0, 1], got {correct_share}");
    }
    let outcomes: Vec<Outcome> = read_json(outcomes)?;
    let ids = evaluation::stratified_sample(&outcomes, n, correct_share, seed)?;
    emit(out, &pretty(&ids)?)
}
