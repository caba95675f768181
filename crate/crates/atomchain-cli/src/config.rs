//! Layered run configuration: defaults, then a key=value file, then
//! environment variables, then command-line flags. Later layers win.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use atomchain::claimgen::FactorySettings;
use atomchain::client::{BackendRegistry, BackendSettings, LlmClient, SessionSink};
use atomchain::orchestrator::{NeiPolicy, RunSettings};
use atomchain::prompt::TemplateSet;
use clap::{Args, ValueEnum};

pub const ENV_API_KEY: &str = "ATOMCHAIN_API_KEY";
pub const ENV_BACKEND: &str = "ATOMCHAIN_BACKEND";
pub const ENV_MODEL: &str = "ATOMCHAIN_MODEL";
pub const ENV_ENDPOINT: &str = "ATOMCHAIN_ENDPOINT";

/// Flags shared by every subcommand. Anything set here overrides the
/// environment, which overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Key=value configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Generation backend to use (live, replay, mock).
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Model name sent with every request.
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Chat-completion endpoint URL (live backend).
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    /// Recorded session file to replay responses from (replay backend).
    #[arg(long, global = true, value_name = "FILE")]
    pub session: Option<PathBuf>,
    /// Rule script serving canned responses (mock backend).
    #[arg(long, global = true, value_name = "FILE")]
    pub script: Option<PathBuf>,
    /// Record every model exchange into this session file.
    #[arg(long, global = true, value_name = "FILE")]
    pub record: Option<PathBuf>,
    /// Base sampling seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Sampling temperature.
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// Parallel worker count for batch runs.
    #[arg(long, global = true)]
    pub concurrency: Option<usize>,
    /// Prompt template bundle (defaults to the built-in bundle).
    #[arg(long, global = true, value_name = "FILE")]
    pub templates: Option<PathBuf>,
    /// How NOT_ENOUGH_INFO predictions are scored.
    #[arg(long, global = true, value_enum)]
    pub nei_policy: Option<NeiPolicyArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NeiPolicyArg {
    /// Scored and counted as incorrect.
    Wrong,
    /// Left out of the accuracy denominator.
    Excluded,
}

impl From<NeiPolicyArg> for NeiPolicy {
    fn from(arg: NeiPolicyArg) -> NeiPolicy {
        match arg {
            NeiPolicyArg::Wrong => NeiPolicy::Wrong,
            NeiPolicyArg::Excluded => NeiPolicy::Excluded,
        }
    }
}

/// Fully resolved configuration for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backend: String,
    pub model: String,
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub session: Option<PathBuf>,
    pub script: Option<PathBuf>,
    pub record: Option<PathBuf>,
    pub temperature: f64,
    pub nucleus: f64,
    pub max_tokens: u32,
    pub max_plans: usize,
    pub retries: u32,
    pub concurrency: usize,
    pub seed: Option<u64>,
    pub templates: Option<PathBuf>,
    pub train_size: usize,
    pub val_size: usize,
    pub flip_fraction: f64,
    pub nei_policy: NeiPolicy,
    pub include_prior_recaps: bool,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        let run = RunSettings::default();
        let factory = FactorySettings::default();
        RunConfig {
            backend: "live".to_string(),
            model: run.model,
            endpoint: None,
            api_key: None,
            session: None,
            script: None,
            record: None,
            temperature: run.temperature,
            nucleus: run.nucleus_p,
            max_tokens: run.max_tokens,
            max_plans: run.max_plans,
            retries: run.stage_retries,
            concurrency: 4,
            seed: None,
            templates: None,
            train_size: 350,
            val_size: 50,
            flip_fraction: factory.flip_max_fraction,
            nei_policy: NeiPolicy::Wrong,
            include_prior_recaps: run.include_prior_recaps,
        }
    }
}

impl RunConfig {
    /// Resolves the full layering: defaults <- file <- env <- flags.
    pub fn load(overrides: &Overrides) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        if let Some(path) = &overrides.config {
            config.apply_file(path)?;
        }
        config.apply_env();
        config.apply_overrides(overrides);
        config.validate()?;
        Ok(config)
    }

    fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("{}:{}: expected key=value, found {:?}", path.display(), i + 1, raw);
            };
            let key = key.trim();
            let value = value.trim();
            self.apply_key(key, value)
                .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        }
        Ok(())
    }

    fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "backend" => self.backend = value.to_string(),
            "model" => self.model = value.to_string(),
            "endpoint" => self.endpoint = Some(value.to_string()),
            "api_key" => {
                bail!("secrets do not belong in config files; set {ENV_API_KEY} instead")
            }
            "session" => self.session = Some(PathBuf::from(value)),
            "script" => self.script = Some(PathBuf::from(value)),
            "record" => self.record = Some(PathBuf::from(value)),
            "temperature" => self.temperature = value.parse()?,
            "nucleus" => self.nucleus = value.parse()?,
            "max_tokens" => self.max_tokens = value.parse()?,
            "max_plans" => self.max_plans = value.parse()?,
            "retries" => self.retries = value.parse()?,
            "concurrency" => self.concurrency = value.parse()?,
            "seed" => self.seed = Some(value.parse()?),
            "templates" => self.templates = Some(PathBuf::from(value)),
            "train_size" => self.train_size = value.parse()?,
            "val_size" => self.val_size = value.parse()?,
            "flip_fraction" => self.flip_fraction = value.parse()?,
            "nei_policy" => {
                self.nei_policy = match value {
                    "wrong" => NeiPolicy::Wrong,
                    "excluded" => NeiPolicy::Excluded,
                    other => bail!("nei_policy must be wrong or excluded, found {other:?}"),
                }
            }
            "include_prior_recaps" => self.include_prior_recaps = value.parse()?,
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    fn apply_env(&mut self) {
        if let Ok(value) = std::env::var(ENV_API_KEY) {
            self.api_key = Some(value);
        }
        if let Ok(value) = std::env::var(ENV_BACKEND) {
            self.backend = value;
        }
        if let Ok(value) = std::env::var(ENV_MODEL) {
            self.model = value;
        }
        if let Ok(value) = std::env::var(ENV_ENDPOINT) {
            self.endpoint = Some(value);
        }
    }

    fn apply_overrides(&mut self, overrides: &Overrides) {
        if let Some(backend) = &overrides.backend {
            self.backend = backend.clone();
        }
        if let Some(model) = &overrides.model {
            self.model = model.clone();
        }
        if let Some(endpoint) = &overrides.endpoint {
            self.endpoint = Some(endpoint.clone());
        }
        if let Some(session) = &overrides.session {
            self.session = Some(session.clone());
        }
        if let Some(script) = &overrides.script {
            self.script = Some(script.clone());
        }
        if let Some(record) = &overrides.record {
            self.record = Some(record.clone());
        }
        if let Some(seed) = overrides.seed {
            self.seed = Some(seed);
        }
        if let Some(temperature) = overrides.temperature {
            self.temperature = temperature;
        }
        if let Some(concurrency) = overrides.concurrency {
            self.concurrency = concurrency;
        }
        if let Some(templates) = &overrides.templates {
            self.templates = Some(templates.clone());
        }
        if let Some(policy) = overrides.nei_policy {
            self.nei_policy = policy.into();
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            bail!("temperature must be a finite non-negative number");
        }
        if !self.nucleus.is_finite() || self.nucleus <= 0.0 || self.nucleus > 1.0 {
            bail!("nucleus must be in (0, 1]");
        }
        if self.max_tokens == 0 {
            bail!("max_tokens must be positive");
        }
        if self.max_plans == 0 {
            bail!("max_plans must be positive");
        }
        if self.concurrency == 0 {
            bail!("concurrency must be positive");
        }
        if !self.flip_fraction.is_finite() || self.flip_fraction <= 0.0 || self.flip_fraction > 1.0
        {
            bail!("flip_fraction must be in (0, 1]");
        }
        Ok(())
    }

    pub fn run_settings(&self) -> RunSettings {
        RunSettings {
            model: self.model.clone(),
            temperature: self.temperature,
            nucleus_p: self.nucleus,
            max_tokens: self.max_tokens,
            seed: self.seed,
            max_plans: self.max_plans,
            stage_retries: self.retries,
            include_prior_recaps: self.include_prior_recaps,
        }
    }

    pub fn factory_settings(&self) -> FactorySettings {
        FactorySettings {
            max_regenerations: self.retries,
            flip_max_fraction: self.flip_fraction,
            ..FactorySettings::default()
        }
    }

    /// Builds the configured backend through the registry and wraps it
    /// in a client, recording exchanges when requested.
    pub fn build_client(&self) -> Result<LlmClient> {
        let registry = BackendRegistry::with_builtins();
        let settings = BackendSettings {
            endpoint: self.endpoint.clone(),
            api_key: self.api_key.clone(),
            session_path: self.session.clone(),
            script_path: self.script.clone(),
        };
        let backend = registry
            .create(&self.backend, &settings)
            .with_context(|| format!("building the {:?} backend", self.backend))?;
        let mut client = LlmClient::new(backend);
        if let Some(record) = &self.record {
            let sink = SessionSink::open(record)
                .with_context(|| format!("opening session recorder {}", record.display()))?;
            client = client.with_recorder(sink);
        }
        Ok(client)
    }

    pub fn template_set(&self) -> Result<TemplateSet> {
        match &self.templates {
            Some(path) => TemplateSet::load(path)
                .with_context(|| format!("loading template bundle {}", path.display())),
            None => Ok(TemplateSet::default_bundle()),
        }
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "backend={} model={} concurrency={}", self.backend, self.model, self.concurrency)
    }
}
