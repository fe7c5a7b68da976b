//! The declarative run configuration read by the CLI.
//!
//! ```toml
//! seed = 7
//!
//! [backend]
//! mock = "fixtures/mock.toml"        # or: endpoint = "https://.../chat/completions"
//! model = "some-model"
//! auth_env = "MEDADAPT_TOKEN"
//! timeout_secs = 60
//! concurrency = 4
//! [backend.retry]
//! max_attempts = 3
//! base_delay_ms = 200
//!
//! [paths]
//! data_in = "data/pqal.jsonl"
//! data_out = "out"
//! templates_dir = "templates"
//! transcripts_dir = "out/transcripts"
//!
//! [strategy]
//! kind = "voc"
//! temperature = 0.0
//! [strategy.templates]
//! voc_final = "..."
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backend::{with_retry, Backend, BackendError, HttpBackend, HttpConfig, Limited, MockBackend, MockScript};
use crate::prompting::{PromptError, Strategy, StrategyKind};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub endpoint: Option<String>,
    /// Path to a mock script (TOML).
    pub mock: Option<PathBuf>,
    pub model: Option<String>,
    pub auth_env: Option<String>,
    pub timeout_secs: Option<u64>,
    pub retry: RetryPolicy,
    pub concurrency: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub data_in: Option<PathBuf>,
    pub data_out: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    pub transcripts_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategySection {
    pub kind: Option<StrategyKind>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    /// Inline template overrides by name.
    pub templates: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub backend: BackendSection,
    pub paths: PathsSection,
    pub strategy: StrategySection,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.into(),
            message: e.to_string().trim().replace('\n', " "),
        })?;
        // Relative paths in a config file are relative to the file.
        if let Some(base) = Path::new(origin).parent().filter(|p| !p.as_os_str().is_empty()) {
            cfg.rebase(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.backend.mock);
        fix(&mut self.paths.data_in);
        fix(&mut self.paths.data_out);
        fix(&mut self.paths.templates_dir);
        fix(&mut self.paths.transcripts_dir);
    }

    /// Checks that hold regardless of the command.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let b = &self.backend;
        if b.endpoint.is_some() && b.mock.is_some() {
            return Err(ConfigError::Invalid(
                "backend: specify exactly one of `endpoint` and `mock`".into(),
            ));
        }
        if b.endpoint.is_some() && b.model.is_none() {
            return Err(ConfigError::Invalid("backend: `endpoint` requires `model`".into()));
        }
        if b.retry.max_attempts == 0 {
            return Err(ConfigError::Invalid("backend.retry.max_attempts must be at least 1".into()));
        }
        if b.concurrency == Some(0) {
            return Err(ConfigError::Invalid("backend.concurrency must be at least 1".into()));
        }
        if self.strategy.temperature.is_some_and(|t| !(t >= 0.0)) {
            return Err(ConfigError::Invalid("strategy.temperature must be >= 0".into()));
        }
        Ok(())
    }

    /// The seed, required by sampling commands.
    pub fn require_seed(&self, flag: Option<u64>) -> Result<u64, ConfigError> {
        flag.or(self.seed).ok_or_else(|| {
            ConfigError::Invalid("this command samples; pass --seed or set `seed` in the config".into())
        })
    }

    pub fn concurrency(&self, flag: Option<usize>) -> usize {
        flag.or(self.backend.concurrency).unwrap_or(1).max(1)
    }

    /// Builds the strategy from the config, with `kind` overriding the file.
    pub fn strategy(&self, kind: Option<StrategyKind>, templates_dir: Option<&Path>) -> Result<Strategy, ConfigError> {
        let kind = kind.or(self.strategy.kind).unwrap_or(StrategyKind::Voc);
        let mut s = Strategy::new(kind);
        if let Some(t) = self.strategy.temperature {
            s.temperature = t;
        }
        if let Some(m) = self.strategy.max_tokens {
            s.max_tokens = m;
        }
        if let Some(dir) = templates_dir.or(self.paths.templates_dir.as_deref()) {
            s = s.with_templates_dir(dir)?;
        }
        for (name, text) in &self.strategy.templates {
            s = s.with_template(name, text)?;
        }
        Ok(s.with_concurrency(self.concurrency(None)))
    }

    /// A mock is loaded from its script; an endpoint gets retries and a
    /// concurrency limit. Nothing touches the network here.
    pub fn backend(&self, mock_override: Option<&Path>) -> Result<Arc<dyn Backend>, ConfigError> {
        let b = &self.backend;
        if let Some(path) = mock_override.or(b.mock.as_deref()) {
            return Ok(Arc::new(MockBackend::new(MockScript::load(path)?)));
        }
        let Some(endpoint) = &b.endpoint else {
            return Err(ConfigError::Invalid(
                "this command needs a backend: set backend.endpoint or backend.mock (or pass --mock)".into(),
            ));
        };
        let http = HttpBackend::new(HttpConfig {
            endpoint: endpoint.clone(),
            model: b.model.clone().unwrap_or_default(),
            auth_env: b.auth_env.clone(),
            timeout_secs: b.timeout_secs.unwrap_or(60),
        })?;
        let retried = with_retry(http, b.retry.max_attempts, Duration::from_millis(b.retry.base_delay_ms))?;
        Ok(Arc::new(Limited::new(retried, self.concurrency(None))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_and_mock_are_exclusive() {
        let err = RunConfig::from_toml("[backend]\nendpoint = \"http://x\"\nmodel = \"m\"\nmock = \"m.toml\"\n", "c.toml");
        assert!(matches!(err, Err(ConfigError::Invalid(_))));
        assert!(RunConfig::from_toml("[backend]\nendpoint = \"http://x\"\nmodel = \"m\"\n", "c.toml").is_ok());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::from_toml("[paths]\ndata = \"x\"\n", "c.toml"),
            Err(ConfigError::Parse { .. })
        ));
    }

    #[test]
    fn flag_wins_over_file() {
        let cfg = RunConfig::from_toml("seed = 3\n[backend]\nconcurrency = 2\n[strategy]\nkind = \"cot\"\n", "c.toml").unwrap();
        assert_eq!(cfg.require_seed(None).unwrap(), 3);
        assert_eq!(cfg.require_seed(Some(9)).unwrap(), 9);
        assert_eq!(cfg.concurrency(Some(5)), 5);
        assert_eq!(cfg.strategy(None, None).unwrap().kind, StrategyKind::Cot);
        assert_eq!(cfg.strategy(Some(StrategyKind::Voc), None).unwrap().kind, StrategyKind::Voc);
        assert!(RunConfig::default().require_seed(None).is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let cfg = RunConfig::from_toml("[paths]\ndata_in = \"d.jsonl\"\n", "conf/run.toml").unwrap();
        assert_eq!(cfg.paths.data_in.unwrap(), Path::new("conf/d.jsonl"));
    }
}
