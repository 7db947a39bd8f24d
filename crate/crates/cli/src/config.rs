//! Run configuration: one TOML file, overridden by command-line flags.
//! Credentials are only ever read from the environment.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use coe_core::chain::DEFAULT_ALPHA;
use coe_core::clustering::{Entailment, LexicalOracle, LlmEntailment, MergePolicy, NliEndpoint};
use coe_core::database::FailedChannels;
use coe_core::gateway::{Gateway, HttpTransport, MockBackend, RemoteEndpoint, RequestProfile, ResponseCache, Task};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Deterministic offline responder.
    Mock,
    /// Answers only from the response cache.
    Replay,
    /// Live HTTP endpoint, recorded into the cache.
    Remote,
    /// Lexical synonym oracle (entailment only).
    Lexical,
    /// NLI classifier endpoint (entailment only).
    Nli,
    /// No backend configured.
    None,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Backends {
    pub describer: BackendKind,
    pub entailment: BackendKind,
    pub filter: BackendKind,
    pub synthesizer: BackendKind,
    pub judge: BackendKind,
    pub captioner: BackendKind,
}

impl Default for Backends {
    fn default() -> Self {
        Self {
            describer: BackendKind::Mock,
            entailment: BackendKind::Lexical,
            filter: BackendKind::Mock,
            synthesizer: BackendKind::Mock,
            judge: BackendKind::Mock,
            captioner: BackendKind::None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub url: String,
    pub backend_id: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            url: "http://localhost:8000/v1/chat/completions".into(),
            backend_id: "remote".into(),
            api_key_env: "COE_API_KEY".into(),
            timeout_secs: 120,
            in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Models {
    pub describer: Option<String>,
    pub entailment: Option<String>,
    pub filter: Option<String>,
    pub synthesizer: Option<String>,
    pub judge: Option<String>,
    pub captioner: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Expected patches per concept; checked against the manifest when set.
    pub n_patches: Option<usize>,
    pub atoms_per_patch: usize,
    pub alpha: f64,
    pub policy: String,
    pub parallel: usize,
    pub fail_on_failed_channels: bool,
    pub cache_dir: PathBuf,
    pub synonyms: Option<PathBuf>,
    pub nli_url: Option<String>,
    pub backends: Backends,
    pub remote: RemoteConfig,
    pub models: Models,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_patches: None,
            atoms_per_patch: coe_core::acd::DEFAULT_ATOMS_PER_PATCH,
            alpha: DEFAULT_ALPHA,
            policy: "strict".into(),
            parallel: 1,
            fail_on_failed_channels: false,
            cache_dir: PathBuf::from(".coe-cache"),
            synonyms: None,
            nli_url: None,
            backends: Backends::default(),
            remote: RemoteConfig::default(),
            models: Models::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if config.cache_dir.is_relative() {
            config.cache_dir = base.join(&config.cache_dir);
        }
        if let Some(s) = config.synonyms.as_mut().filter(|s| s.is_relative()) {
            *s = base.join(&*s);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            bail!("alpha must lie in (0, 1), got {}", self.alpha);
        }
        if self.atoms_per_patch == 0 {
            bail!("atoms_per_patch must be at least 1");
        }
        if self.n_patches == Some(0) {
            bail!("n_patches must be at least 1");
        }
        if self.parallel == 0 {
            bail!("parallel must be at least 1");
        }
        self.merge_policy()?;
        Ok(())
    }

    pub fn merge_policy(&self) -> Result<MergePolicy> {
        self.policy.parse::<MergePolicy>().map_err(|e| anyhow::anyhow!("{e}"))
    }

    pub fn failed_channels(&self) -> FailedChannels {
        if self.fail_on_failed_channels {
            FailedChannels::Fail
        } else {
            FailedChannels::Skip
        }
    }

    pub fn profile(&self, task: Task) -> RequestProfile {
        let mut profile = RequestProfile::default_for(task);
        let tag = match task {
            Task::Describe => &self.models.describer,
            Task::Entail => &self.models.entailment,
            Task::Filter => &self.models.filter,
            Task::Synthesize => &self.models.synthesizer,
            Task::Judge => &self.models.judge,
            Task::Caption => &self.models.captioner,
        };
        if let Some(tag) = tag {
            profile.model_tag = tag.clone();
        }
        profile
    }

    /// Builds a chat gateway for one role, or `None` when the role is off.
    pub fn gateway(&self, role: &str, kind: BackendKind) -> Result<Option<Gateway>> {
        Ok(Some(match kind {
            BackendKind::None => return Ok(None),
            BackendKind::Mock => Gateway::mock(MockBackend::default()),
            BackendKind::Replay => Gateway::replay(&self.remote.backend_id, ResponseCache::open(&self.cache_dir)?),
            BackendKind::Remote => Gateway::remote(
                &self.remote.backend_id,
                RemoteEndpoint {
                    url: self.remote.url.clone(),
                    api_key_env: Some(self.remote.api_key_env.clone()),
                },
                Arc::new(HttpTransport::new(Duration::from_secs(self.remote.timeout_secs))),
                ResponseCache::open(&self.cache_dir)?,
            )
            .with_in_flight_limit(self.remote.in_flight),
            BackendKind::Lexical | BackendKind::Nli => {
                bail!("backend {kind:?} cannot serve the {role} role")
            }
        }))
    }

    pub fn entailment(&self) -> Result<Box<dyn Entailment>> {
        Ok(match self.backends.entailment {
            BackendKind::Lexical => Box::new(match &self.synonyms {
                Some(path) => LexicalOracle::from_file(path)?,
                None => LexicalOracle::new(),
            }),
            BackendKind::Nli => {
                let url = self
                    .nli_url
                    .clone()
                    .context("entailment backend `nli` needs `nli_url`")?;
                Box::new(NliEndpoint::new(
                    url,
                    Arc::new(HttpTransport::new(Duration::from_secs(self.remote.timeout_secs))),
                ))
            }
            kind => {
                let gateway = self
                    .gateway("entailment", kind)?
                    .context("an entailment backend is required")?;
                Box::new(LlmEntailment::new(Arc::new(gateway), self.profile(Task::Entail)))
            }
        })
    }
}
