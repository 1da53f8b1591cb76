//! Static-analyzer adapter. The contract is a SARIF subset: only
//! `runs[].results[]` with ruleId, level, one physical location (file + line)
//! and a message text are consumed.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;

use serde::Deserialize;
use thiserror::Error;

use crate::model::{AnalyzerFinding, Language, Severity};

#[derive(Debug, Error)]
pub enum AnalyzerError {
    #[error("analyzer unavailable: {0}")]
    Unavailable(String),
    #[error("analyzer result parse failed: {0}")]
    ResultParse(String),
}

pub trait Analyzer: Send + Sync {
    fn analyze(
        &self,
        src_dir: &Path,
        language: Language,
        query_pack: &str,
    ) -> Result<Vec<AnalyzerFinding>, AnalyzerError>;
}

#[derive(Deserialize)]
struct SarifLog {
    runs: Vec<SarifRun>,
}

#[derive(Deserialize)]
struct SarifRun {
    #[serde(default)]
    results: Vec<SarifResult>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct SarifResult {
    rule_id: String,
    level: Option<String>,
    message: SarifMessage,
    locations: Vec<SarifLocation>,
}

#[derive(Deserialize)]
struct SarifMessage {
    text: String,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct SarifLocation {
    physical_location: SarifPhysicalLocation,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct SarifPhysicalLocation {
    artifact_location: SarifArtifactLocation,
    region: SarifRegion,
}

#[derive(Deserialize)]
struct SarifArtifactLocation {
    uri: String,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct SarifRegion {
    start_line: u32,
}

/// Parses the documented SARIF subset. Every well-formed result either maps
/// to a finding or the whole parse fails; nothing is silently dropped.
pub fn parse_sarif(text: &str) -> Result<Vec<AnalyzerFinding>, AnalyzerError> {
    let log: SarifLog =
        serde_json::from_str(text).map_err(|e| AnalyzerError::ResultParse(e.to_string()))?;
    let mut findings = Vec::new();
    for run in log.runs {
        for result in run.results {
            if result.rule_id.is_empty() {
                return Err(AnalyzerError::ResultParse("empty ruleId".into()));
            }
            let location = result
                .locations
                .first()
                .ok_or_else(|| AnalyzerError::ResultParse("result has no locations".into()))?;
            let line = location.physical_location.region.start_line;
            if line < 1 {
                return Err(AnalyzerError::ResultParse(format!(
                    "startLine {line} below 1"
                )));
            }
            findings.push(AnalyzerFinding {
                rule_id: result.rule_id,
                severity: result
                    .level
                    .as_deref()
                    .map(Severity::from_level)
                    .unwrap_or(Severity::Warning),
                file: location.physical_location.artifact_location.uri.clone(),
                line,
                message: result.message.text.clone(),
            });
        }
    }
    Ok(findings)
}

/// Spawns an external analyzer from a command template with `{src_dir}`,
/// `{language}` and `{out_file}` placeholders, then parses the SARIF output.
pub struct CommandAnalyzer {
    template: String,
}

impl CommandAnalyzer {
    pub fn new(template: impl Into<String>) -> Self {
        CommandAnalyzer {
            template: template.into(),
        }
    }
}

impl Analyzer for CommandAnalyzer {
    fn analyze(
        &self,
        src_dir: &Path,
        language: Language,
        _query_pack: &str,
    ) -> Result<Vec<AnalyzerFinding>, AnalyzerError> {
        let out_file = src_dir.join("analysis.sarif");
        let rendered = self
            .template
            .replace("{src_dir}", &src_dir.to_string_lossy())
            .replace("{language}", &language.to_string())
            .replace("{out_file}", &out_file.to_string_lossy());
        let mut parts = rendered.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| AnalyzerError::Unavailable("empty analyzer command".into()))?;
        let status = Command::new(program)
            .args(parts)
            .status()
            .map_err(|e| AnalyzerError::Unavailable(format!("{program}: {e}")))?;
        if !status.success() {
            return Err(AnalyzerError::Unavailable(format!(
                "analyzer exited with {status}"
            )));
        }
        let text = std::fs::read_to_string(&out_file)
            .map_err(|e| AnalyzerError::Unavailable(format!("missing result file: {e}")))?;
        parse_sarif(&text)
    }
}

/// Serves findings parsed from a fixture SARIF file instead of spawning.
pub struct FixtureAnalyzer {
    path: PathBuf,
}

impl FixtureAnalyzer {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        FixtureAnalyzer { path: path.into() }
    }
}

impl Analyzer for FixtureAnalyzer {
    fn analyze(
        &self,
        _src_dir: &Path,
        _language: Language,
        _query_pack: &str,
    ) -> Result<Vec<AnalyzerFinding>, AnalyzerError> {
        let text = std::fs::read_to_string(&self.path)
            .map_err(|e| AnalyzerError::Unavailable(format!("fixture unreadable: {e}")))?;
        parse_sarif(&text)
    }
}

/// Always reports the same findings.
pub struct StaticAnalyzer {
    findings: Vec<AnalyzerFinding>,
}

impl StaticAnalyzer {
    pub fn clean() -> Self {
        StaticAnalyzer { findings: Vec::new() }
    }

    pub fn with_findings(findings: Vec<AnalyzerFinding>) -> Self {
        StaticAnalyzer { findings }
    }
}

impl Analyzer for StaticAnalyzer {
    fn analyze(
        &self,
        _src_dir: &Path,
        _language: Language,
        _query_pack: &str,
    ) -> Result<Vec<AnalyzerFinding>, AnalyzerError> {
        Ok(self.findings.clone())
    }
}

/// Pops one finding set per call; empty queue means no findings. Lets tests
/// script fail-then-pass validation sequences.
pub struct QueueAnalyzer {
    queue: Mutex<VecDeque<Vec<AnalyzerFinding>>>,
}

impl QueueAnalyzer {
    pub fn new(sequence: Vec<Vec<AnalyzerFinding>>) -> Self {
        QueueAnalyzer {
            queue: Mutex::new(sequence.into()),
        }
    }
}

impl Analyzer for QueueAnalyzer {
    fn analyze(
        &self,
        _src_dir: &Path,
        _language: Language,
        _query_pack: &str,
    ) -> Result<Vec<AnalyzerFinding>, AnalyzerError> {
        let mut queue = self.queue.lock().expect("analyzer queue");
        Ok(queue.pop_front().unwrap_or_default())
    }
}
