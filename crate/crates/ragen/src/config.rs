//! Run configuration: a TOML file with every documented knob, plus the
//! resolved snapshot written into each run directory so runs are
//! reproducible.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codegen::DEFAULT_PROMPT_CAP;
use crate::orchestrator::{
    DEFAULT_DELTA_MAX_MS, DEFAULT_MAX_RESTARTS, DEFAULT_MAX_RETRIES, DEFAULT_SANDBOX_TIMEOUT_MS,
};
use crate::planner::{DEFAULT_FEEDBACK_CAP, DEFAULT_RELEVANCE_THRESHOLD};
use crate::searcher::{DEFAULT_OBSERVATION_CAP, DEFAULT_STEP_BUDGET};

pub const DEFAULT_API_KEY_ENV: &str = "RAGEN_API_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config unreadable: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Replay,
    Scripted,
    Record,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DelayMode {
    Simulated,
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolEntry {
    pub name: String,
    /// "offline_search" (corpus file) or "live_search" (HTTP endpoint).
    pub kind: String,
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_tool_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "default_tool_k")]
    pub k: usize,
    #[serde(default = "default_true")]
    pub enabled: bool,
}

fn default_tool_timeout() -> u64 {
    5000
}

fn default_tool_k() -> usize {
    3
}

fn default_true() -> bool {
    true
}

/// The full documented key set. Credentials never appear here: live backends
/// read the API key from the environment variable named by `api_key_env`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub backend: BackendKind,
    pub model: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_step_budget")]
    pub step_budget: usize,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_max_restarts")]
    pub max_restarts: u32,
    #[serde(default = "default_delta_max_ms")]
    pub delta_max_ms: u64,
    #[serde(default = "default_delay_mode")]
    pub delay_mode: DelayMode,
    #[serde(default = "default_observation_cap")]
    pub observation_cap: usize,
    #[serde(default = "default_prompt_cap")]
    pub prompt_cap: usize,
    #[serde(default = "default_feedback_cap")]
    pub feedback_cap: usize,
    #[serde(default = "default_relevance_threshold")]
    pub relevance_threshold: f64,
    #[serde(default = "default_sandbox_timeout_ms")]
    pub sandbox_timeout_ms: u64,
    #[serde(default = "default_query_pack")]
    pub query_pack: String,
    #[serde(default)]
    pub template_dir: Option<PathBuf>,
    #[serde(default)]
    pub tools: Vec<ToolEntry>,
    /// Live/record backends: chat endpoint base URL.
    #[serde(default)]
    pub base_url: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    /// Replay/record backends: directory of recorded responses.
    #[serde(default)]
    pub replay_dir: Option<PathBuf>,
    /// Scripted backend: JSON file holding an array of response strings.
    #[serde(default)]
    pub scripts: Option<PathBuf>,
    /// Optional external analyzer command template; when unset a clean no-op
    /// analyzer is used (placeholders: {src_dir}, {language}, {out_file}).
    #[serde(default)]
    pub analyzer_cmd: Option<String>,
    /// Use the real process sandbox; false substitutes an always-pass stub.
    #[serde(default = "default_true")]
    pub real_sandbox: bool,
}

fn default_step_budget() -> usize {
    DEFAULT_STEP_BUDGET
}
fn default_max_retries() -> u32 {
    DEFAULT_MAX_RETRIES
}
fn default_max_restarts() -> u32 {
    DEFAULT_MAX_RESTARTS
}
fn default_delta_max_ms() -> u64 {
    DEFAULT_DELTA_MAX_MS
}
fn default_delay_mode() -> DelayMode {
    DelayMode::Simulated
}
fn default_observation_cap() -> usize {
    DEFAULT_OBSERVATION_CAP
}
fn default_prompt_cap() -> usize {
    DEFAULT_PROMPT_CAP
}
fn default_feedback_cap() -> usize {
    DEFAULT_FEEDBACK_CAP
}
fn default_relevance_threshold() -> f64 {
    DEFAULT_RELEVANCE_THRESHOLD
}
fn default_sandbox_timeout_ms() -> u64 {
    DEFAULT_SANDBOX_TIMEOUT_MS
}
fn default_query_pack() -> String {
    "security".into()
}
fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.into()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = toml::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.relevance_threshold) {
            return Err(ConfigError::Invalid(format!(
                "relevance_threshold {} outside [0,1]",
                self.relevance_threshold
            )));
        }
        if self.step_budget == 0 {
            return Err(ConfigError::Invalid("step_budget must be positive".into()));
        }
        match self.backend {
            BackendKind::Replay | BackendKind::Record if self.replay_dir.is_none() => Err(
                ConfigError::Invalid("replay and record backends need replay_dir".into()),
            ),
            BackendKind::Scripted if self.scripts.is_none() => Err(ConfigError::Invalid(
                "scripted backend needs a scripts file".into(),
            )),
            BackendKind::Live if self.base_url.is_none() => Err(ConfigError::Invalid(
                "live backend needs base_url".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Fills in the concrete seed so the snapshot alone reproduces the run.
    pub fn resolve(&self, seed_override: Option<u64>) -> ResolvedConfig {
        let seed = seed_override
            .or(self.seed)
            .unwrap_or_else(generate_seed);
        ResolvedConfig {
            config: RunConfig {
                seed: Some(seed),
                ..self.clone()
            },
            seed,
        }
    }
}

/// A run-ready snapshot: every optional knob pinned down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    #[serde(flatten)]
    pub config: RunConfig,
    pub seed: u64,
}

impl ResolvedConfig {
    pub fn write_snapshot(&self, path: &Path) -> Result<(), ConfigError> {
        let text = toml::to_string_pretty(&self.config)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

fn generate_seed() -> u64 {
    use std::time::{SystemTime, UNIX_EPOCH};
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "backend = \"scripted\"\nmodel = \"test\"\nscripts = \"scripts.json\"\n";

    #[test]
    fn minimal_config_gets_documented_defaults() {
        let config: RunConfig = toml::from_str(MINIMAL).unwrap();
        config.validate().unwrap();
        assert_eq!(config.step_budget, 6);
        assert_eq!(config.max_retries, 2);
        assert_eq!(config.max_restarts, 1);
        assert_eq!(config.delta_max_ms, 5000);
        assert_eq!(config.delay_mode, DelayMode::Simulated);
        assert_eq!(config.observation_cap, 4000);
        assert_eq!(config.prompt_cap, 12000);
        assert_eq!(config.relevance_threshold, 0.2);
        assert_eq!(config.api_key_env, "RAGEN_API_KEY");
    }

    #[test]
    fn replay_without_dir_is_invalid() {
        let config: RunConfig =
            toml::from_str("backend = \"replay\"\nmodel = \"m\"\n").unwrap();
        assert!(matches!(config.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn live_without_base_url_is_invalid() {
        let config: RunConfig = toml::from_str("backend = \"live\"\nmodel = \"m\"\n").unwrap();
        assert!(matches!(config.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn resolve_prefers_override_then_file_seed() {
        let config: RunConfig = toml::from_str(MINIMAL).unwrap();
        assert_eq!(config.resolve(Some(7)).seed, 7);
        let with_seed = RunConfig {
            seed: Some(11),
            ..config.clone()
        };
        assert_eq!(with_seed.resolve(None).seed, 11);
        // No seed anywhere: one is generated and pinned into the snapshot.
        let resolved = config.resolve(None);
        assert_eq!(resolved.config.seed, Some(resolved.seed));
    }

    #[test]
    fn snapshot_round_trips() {
        let config: RunConfig = toml::from_str(MINIMAL).unwrap();
        let resolved = config.resolve(Some(42));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snapshot.toml");
        resolved.write_snapshot(&path).unwrap();
        let reloaded = RunConfig::load(&path).unwrap();
        assert_eq!(reloaded, resolved.config);
    }

    #[test]
    fn tool_entries_parse() {
        let text = format!(
            "{MINIMAL}\n[[tools]]\nname = \"search\"\nkind = \"offline_search\"\ncorpus = \"corpus.json\"\n"
        );
        let config: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(config.tools.len(), 1);
        assert_eq!(config.tools[0].timeout_ms, 5000);
        assert!(config.tools[0].enabled);
    }
}
