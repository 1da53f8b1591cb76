//! Benchmark harness: loads CWE scenario manifests, drives the pipeline over
//! each entry, computes batch metrics, and renders report rows. A GPT-style
//! rubric prompt/parser covers qualitative scoring.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{ChatMessage, ChatRequest, Role};
use crate::clock::SimClock;
use crate::model::{CodeSnippet, Language, TaskSpec};
use crate::orchestrator::{run_pipeline, Agents, OrchestratorConfig};
use crate::templates::TemplateSet;
use crate::trace::TraceEvent;

pub const MANIFEST_FIELDS: usize = 6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("manifest parse error at line {line}: {reason}")]
    ManifestParse { line: usize, reason: String },
    #[error("duplicate scenario {cwe}/{scenario}")]
    DuplicateScenario { cwe: String, scenario: String },
    #[error("manifest unreadable: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics over an empty batch")]
    EmptyBatch,
    #[error("no scores block found in rubric response")]
    RubricParse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Test,
    Val,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "test" => Some(Split::Test),
            "val" => Some(Split::Val),
            _ => None,
        }
    }
}

/// One benchmark scenario row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEntry {
    pub cwe: String,
    pub scenario: String,
    pub split: Split,
    pub language: Language,
    pub prompt: String,
    pub analyzer_query: String,
}

/// Loads a tab-separated manifest:
/// `cwe<TAB>scenario<TAB>split<TAB>language<TAB>prompt<TAB>analyzer_query`.
/// Lines starting with `#` and blank lines are skipped.
pub fn load_manifest(path: &Path) -> Result<Vec<ScenarioEntry>, EvalError> {
    let text = std::fs::read_to_string(path)?;
    let mut entries: Vec<ScenarioEntry> = Vec::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw_line.trim_end();
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != MANIFEST_FIELDS {
            return Err(EvalError::ManifestParse {
                line: line_no,
                reason: format!("expected {MANIFEST_FIELDS} tab-separated fields, got {}", fields.len()),
            });
        }
        let split = Split::parse(fields[2]).ok_or_else(|| EvalError::ManifestParse {
            line: line_no,
            reason: format!("unknown split {:?}", fields[2]),
        })?;
        let language = Language::from_str_loose(fields[3]).ok_or_else(|| EvalError::ManifestParse {
            line: line_no,
            reason: format!("unknown language {:?}", fields[3]),
        })?;
        let scenario = fields[1].to_string();
        let suffix_ok = match language {
            Language::Python => scenario.ends_with("-py"),
            Language::C | Language::Cpp => scenario.ends_with("-c"),
        };
        if !suffix_ok {
            return Err(EvalError::ManifestParse {
                line: line_no,
                reason: format!("scenario suffix of {scenario:?} does not match language {language}"),
            });
        }
        let entry = ScenarioEntry {
            cwe: fields[0].to_string(),
            scenario,
            split,
            language,
            prompt: fields[4].to_string(),
            analyzer_query: fields[5].to_string(),
        };
        if entries
            .iter()
            .any(|e| e.cwe == entry.cwe && e.scenario == entry.scenario)
        {
            return Err(EvalError::DuplicateScenario {
                cwe: entry.cwe,
                scenario: entry.scenario,
            });
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Outcome of one scenario run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub cwe: String,
    pub scenario: String,
    pub compiled: bool,
    pub ran: bool,
    /// No analyzer findings matching the scenario's query on the final
    /// program.
    pub secure: bool,
    pub unresolved_findings: u64,
    pub llm_calls: u64,
    pub wall_ms: u64,
    pub sec_score: Option<u32>,
}

/// Batch metrics. Counts are reals so means over repeated runs keep their
/// fractional part, matching how the reference tables report them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sec_rate: f64,
    pub pass_rate: f64,
    pub eff_mean_seconds: f64,
    pub eff_mean_llm_calls: f64,
    pub sec_count: f64,
    pub unres_count: f64,
    pub sec_score_mean: Option<f64>,
}

pub fn task_for(entry: &ScenarioEntry, index: usize) -> TaskSpec {
    TaskSpec {
        task_id: format!("cwe{}-{}-{}", entry.cwe, entry.scenario, index),
        description: entry.prompt.clone(),
        target_language: entry.language,
        inputs: vec![],
        outputs: vec![],
        cwe_hint: Some(entry.cwe.clone()),
    }
}

fn matches_query(rule_id: &str, query: &str) -> bool {
    query.is_empty() || rule_id.contains(query)
}

/// Runs the pipeline over every entry. Per-entry failures are embedded in the
/// result row; the batch never aborts.
pub fn evaluate<F>(
    entries: &[ScenarioEntry],
    cfg: &OrchestratorConfig,
    mut build_agents: F,
) -> Vec<ScenarioResult>
where
    F: FnMut(&ScenarioEntry) -> Agents,
{
    let mut results: Vec<ScenarioResult> = entries
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let agents = build_agents(entry);
            let task = task_for(entry, i);
            let clock = SimClock::new();
            let run_id = format!("eval-{}-{}", entry.cwe, entry.scenario);
            match run_pipeline(&task, &agents, cfg, &clock, None, &run_id) {
                Ok(outcome) => {
                    let findings = final_findings(&agents, &outcome.program);
                    let matching = findings
                        .iter()
                        .filter(|f| matches_query(&f.rule_id, &entry.analyzer_query))
                        .count();
                    ScenarioResult {
                        cwe: entry.cwe.clone(),
                        scenario: entry.scenario.clone(),
                        compiled: true,
                        ran: true,
                        secure: matching == 0,
                        unresolved_findings: findings.len() as u64,
                        llm_calls: outcome.metrics.llm_calls,
                        wall_ms: outcome.metrics.wall_ms,
                        sec_score: None,
                    }
                }
                Err(failure) => {
                    let unresolved = failure
                        .trajectory
                        .events_of_kind("validation")
                        .last()
                        .map(|e| match e {
                            TraceEvent::Validation(r) => r.findings.len() as u64,
                            _ => 0,
                        })
                        .unwrap_or(0);
                    ScenarioResult {
                        cwe: entry.cwe.clone(),
                        scenario: entry.scenario.clone(),
                        compiled: false,
                        ran: false,
                        secure: false,
                        unresolved_findings: unresolved,
                        llm_calls: 0,
                        wall_ms: failure.state.clock_ms,
                        sec_score: None,
                    }
                }
            }
        })
        .collect();
    results.sort_by(|a, b| (&a.cwe, &a.scenario).cmp(&(&b.cwe, &b.scenario)));
    results
}

/// Post-pipeline scan of the final program scoped by the scenario query.
fn final_findings(agents: &Agents, program: &CodeSnippet) -> Vec<crate::model::AnalyzerFinding> {
    let Ok(dir) = tempfile::tempdir() else {
        return Vec::new();
    };
    let source = dir
        .path()
        .join(format!("main.{}", program.language.file_extension()));
    if std::fs::write(&source, &program.body).is_err() {
        return Vec::new();
    }
    agents
        .analyzer
        .analyze(dir.path(), program.language, "security")
        .unwrap_or_default()
}

pub fn compute_metrics(results: &[ScenarioResult]) -> Result<MetricsReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyBatch);
    }
    let n = results.len() as f64;
    let secure = results.iter().filter(|r| r.secure).count() as f64;
    let passed = results.iter().filter(|r| r.compiled && r.ran).count() as f64;
    let unresolved: u64 = results.iter().map(|r| r.unresolved_findings).sum();
    let wall: f64 = results.iter().map(|r| r.wall_ms as f64 / 1000.0).sum();
    let calls: f64 = results.iter().map(|r| r.llm_calls as f64).sum();
    let scores: Vec<f64> = results
        .iter()
        .filter_map(|r| r.sec_score.map(f64::from))
        .collect();
    Ok(MetricsReport {
        sec_rate: 100.0 * secure / n,
        pass_rate: 100.0 * passed / n,
        eff_mean_seconds: wall / n,
        eff_mean_llm_calls: calls / n,
        sec_count: secure,
        unres_count: unresolved as f64,
        sec_score_mean: if scores.is_empty() {
            None
        } else {
            Some(scores.iter().sum::<f64>() / scores.len() as f64)
        },
    })
}

/// Element-wise mean of reports from repeated runs.
pub fn mean_reports(reports: &[MetricsReport]) -> Result<MetricsReport, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::EmptyBatch);
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let scores: Vec<f64> = reports.iter().filter_map(|r| r.sec_score_mean).collect();
    Ok(MetricsReport {
        sec_rate: mean(|r| r.sec_rate),
        pass_rate: mean(|r| r.pass_rate),
        eff_mean_seconds: mean(|r| r.eff_mean_seconds),
        eff_mean_llm_calls: mean(|r| r.eff_mean_llm_calls),
        sec_count: mean(|r| r.sec_count),
        unres_count: mean(|r| r.unres_count),
        sec_score_mean: if scores.is_empty() {
            None
        } else {
            Some(scores.iter().sum::<f64>() / scores.len() as f64)
        },
    })
}

/// Builds the three-dimension rubric scoring request.
pub fn build_rubric_prompt(code: &CodeSnippet, model: &str) -> ChatRequest {
    let prompt = TemplateSet::builtin()
        .render("rubric", &[("code", code.body.as_str())])
        .expect("builtin rubric template");
    ChatRequest::new(
        model,
        vec![ChatMessage {
            role: Role::User,
            content: prompt,
        }],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RubricScores {
    pub quality: u32,
    pub security: u32,
    pub compliance: u32,
    pub overall: u32,
}

fn clamp_score(v: i64) -> u32 {
    v.clamp(1, 100) as u32
}

/// Parses the `scores` block. Every score is clamped to [1,100]; a missing
/// overall becomes the rounded mean of the three dimensions.
pub fn parse_rubric_response(text: &str) -> Result<RubricScores, EvalError> {
    let block = crate::extractor::fenced_blocks(text)
        .into_iter()
        .find(|(tag, _)| tag.as_deref() == Some("scores"))
        .map(|(_, body)| body)
        .ok_or(EvalError::RubricParse)?;
    let mut quality = None;
    let mut security = None;
    let mut compliance = None;
    let mut overall = None;
    for line in block.lines() {
        let Some((key, value)) = line.split_once(':') else {
            continue;
        };
        let Ok(value) = value.trim().parse::<i64>() else {
            continue;
        };
        match key.trim() {
            "quality" => quality = Some(clamp_score(value)),
            "security" => security = Some(clamp_score(value)),
            "compliance" => compliance = Some(clamp_score(value)),
            "overall" => overall = Some(clamp_score(value)),
            _ => {}
        }
    }
    let (Some(quality), Some(security), Some(compliance)) = (quality, security, compliance) else {
        return Err(EvalError::RubricParse);
    };
    let overall = overall.unwrap_or_else(|| {
        let mean = f64::from(quality + security + compliance) / 3.0;
        mean.round() as u32
    });
    Ok(RubricScores {
        quality,
        security,
        compliance,
        overall,
    })
}

/// One table row: label plus the five headline fields to one decimal place.
pub fn render_report(report: &MetricsReport, label: &str) -> String {
    format!(
        "{label} | {:.1} / {:.1} / {:.1} / {:.1} / {:.1} | mean llm calls {:.1}",
        report.sec_rate,
        report.pass_rate,
        report.eff_mean_seconds,
        report.sec_count,
        report.unres_count,
        report.eff_mean_llm_calls,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn fixture(name: &str) -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
    }

    fn result(secure: bool, passed: bool, unresolved: u64) -> ScenarioResult {
        ScenarioResult {
            cwe: "089".into(),
            scenario: "0-py".into(),
            compiled: passed,
            ran: passed,
            secure,
            unresolved_findings: unresolved,
            llm_calls: 3,
            wall_ms: 1500,
            sec_score: None,
        }
    }

    #[test]
    fn bundled_manifest_matches_reference_counts() {
        let entries = load_manifest(&fixture("sven_scenarios.tsv")).unwrap();
        assert_eq!(entries.len(), 22);
        assert_eq!(entries.iter().filter(|e| e.split == Split::Test).count(), 16);
        assert_eq!(entries.iter().filter(|e| e.split == Split::Val).count(), 6);
        let count = |cwe: &str| entries.iter().filter(|e| e.cwe == cwe).count();
        assert_eq!(count("089"), 3);
        assert_eq!(count("125"), 3);
        assert_eq!(count("078"), 3);
        assert_eq!(count("476"), 2);
        assert_eq!(count("416"), 2);
        assert_eq!(count("022"), 3);
        assert_eq!(count("787"), 3);
        assert_eq!(count("190"), 3);
        assert!(entries
            .iter()
            .any(|e| e.prompt == "removing an email subscription from a database"));
        assert!(entries.iter().any(|e| e.cwe == "190"
            && e.scenario == "0-c"
            && e.split == Split::Test
            && e.prompt == "generating random integers exceeding 1000"));
    }

    #[test]
    fn duplicate_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        let row = "089\t0-py\ttest\tpython\tdo a thing\tsql-injection";
        std::fs::write(&path, format!("{row}\n{row}\n")).unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(EvalError::DuplicateScenario { .. })
        ));
    }

    #[test]
    fn wrong_field_count_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        std::fs::write(&path, "089\t0-py\ttest\n").unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(EvalError::ManifestParse { line: 1, .. })
        ));
    }

    #[test]
    fn suffix_language_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        std::fs::write(&path, "089\t0-c\ttest\tpython\tprompt\tq\n").unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(EvalError::ManifestParse { .. })
        ));
    }

    #[test]
    fn twenty_record_fixture_matches_hand_count() {
        // The expected numbers are committed in metrics_20_handcount.txt next
        // to the fixture.
        let text = std::fs::read_to_string(fixture("metrics_20.jsonl")).unwrap();
        let results: Vec<ScenarioResult> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(results.len(), 20);
        let report = compute_metrics(&results).unwrap();
        assert_eq!(report.pass_rate, 95.0);
        assert_eq!(report.sec_rate, 90.0);
        assert_eq!(report.sec_count, 18.0);
        assert_eq!(report.unres_count, 3.0);
    }

    #[test]
    fn saturated_batch() {
        let results = vec![result(true, true, 0); 5];
        let report = compute_metrics(&results).unwrap();
        assert_eq!(report.sec_rate, 100.0);
        assert_eq!(report.unres_count, 0.0);
    }

    #[test]
    fn degenerate_insecure_batch() {
        let report = compute_metrics(&[result(false, true, 1)]).unwrap();
        assert_eq!(report.sec_rate, 0.0);
        assert_eq!(report.sec_count, 0.0);
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert!(matches!(compute_metrics(&[]), Err(EvalError::EmptyBatch)));
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let mut results = vec![
            result(true, true, 0),
            result(false, true, 2),
            result(true, false, 1),
        ];
        let a = compute_metrics(&results).unwrap();
        results.reverse();
        let b = compute_metrics(&results).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sec_rate_never_exceeds_pass_rate_under_invariant() {
        // Rows keep the secure ⇒ compiled ∧ ran invariant.
        let results = vec![
            result(true, true, 0),
            result(false, true, 1),
            result(false, false, 0),
        ];
        let report = compute_metrics(&results).unwrap();
        assert!(report.sec_rate <= report.pass_rate);
    }

    #[test]
    fn rubric_prompt_has_dimensions_scale_and_levels() {
        let code = CodeSnippet {
            subtask_id: "final".into(),
            attempt: 1,
            language: Language::Python,
            body: "print(1)".into(),
            fenced_origin: false,
        };
        let request = build_rubric_prompt(&code, "scorer");
        let prompt = &request.messages[0].content;
        assert!(prompt.contains("Code Quality"));
        assert!(prompt.contains("Code Security"));
        assert!(prompt.contains("Compliance"));
        assert!(prompt.contains("ranging from 1 to 100"));
        assert!(prompt.contains("fully compliant, partially compliant, or non-compliant"));
        assert!(prompt.contains("print(1)"));
    }

    #[test]
    fn rubric_parse_full_block() {
        let text = "Here you go.\n```scores\nquality: 80\nsecurity: 90\ncompliance: 85\noverall: 85\n```";
        let scores = parse_rubric_response(text).unwrap();
        assert_eq!(
            scores,
            RubricScores {
                quality: 80,
                security: 90,
                compliance: 85,
                overall: 85
            }
        );
    }

    #[test]
    fn rubric_missing_overall_uses_rounded_mean() {
        let text = "```scores\nquality: 60\nsecurity: 90\ncompliance: 90\n```";
        let scores = parse_rubric_response(text).unwrap();
        assert_eq!(scores.overall, 80);
    }

    #[test]
    fn rubric_scores_are_clamped() {
        let text = "```scores\nquality: 150\nsecurity: 0\ncompliance: 85\n```";
        let scores = parse_rubric_response(text).unwrap();
        assert_eq!(scores.quality, 100);
        assert_eq!(scores.security, 1);
    }

    #[test]
    fn rubric_without_block_is_an_error() {
        assert!(matches!(
            parse_rubric_response("no block here"),
            Err(EvalError::RubricParse)
        ));
    }

    #[test]
    fn report_row_formats_reference_values() {
        let report = MetricsReport {
            sec_rate: 94.8,
            pass_rate: 95.8,
            eff_mean_seconds: 24.0,
            eff_mean_llm_calls: 12.0,
            sec_count: 23.7,
            unres_count: 1.0,
            sec_score_mean: None,
        };
        let row = render_report(&report, "RA-Gen");
        assert!(row.contains("94.8 / 95.8 / 24.0 / 23.7 / 1.0"));
    }

    #[test]
    fn zero_report_renders_zero_fields() {
        let report = MetricsReport {
            sec_rate: 0.0,
            pass_rate: 0.0,
            eff_mean_seconds: 0.0,
            eff_mean_llm_calls: 0.0,
            sec_count: 0.0,
            unres_count: 0.0,
            sec_score_mean: None,
        };
        assert!(render_report(&report, "zeros").contains("0.0 / 0.0 / 0.0 / 0.0 / 0.0"));
    }

    #[test]
    fn two_thirds_rounds_to_66_7() {
        let results = vec![
            result(true, true, 0),
            result(true, true, 0),
            result(false, true, 0),
        ];
        let report = compute_metrics(&results).unwrap();
        assert!(render_report(&report, "r").contains("66.7"));
    }

    #[test]
    fn results_round_trip_through_jsonl() {
        let results = vec![result(true, true, 0), result(false, true, 2)];
        let text: String = results
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect();
        let reloaded: Vec<ScenarioResult> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(
            compute_metrics(&results).unwrap(),
            compute_metrics(&reloaded).unwrap()
        );
    }

    #[test]
    fn scripted_batch_is_secure_and_deterministic() {
        let entries = vec![
            ScenarioEntry {
                cwe: "089".into(),
                scenario: "0-py".into(),
                split: Split::Test,
                language: Language::Python,
                prompt: "remove a row".into(),
                analyzer_query: "sql-injection".into(),
            },
            ScenarioEntry {
                cwe: "022".into(),
                scenario: "0-py".into(),
                split: Split::Test,
                language: Language::Python,
                prompt: "read a file".into(),
                analyzer_query: "path-injection".into(),
            },
        ];
        let scripts = || {
            vec![
                "```plan\n0 | 0.9 | - | no | implement it\n```".to_string(),
                "Thought: direct.\nFinal: none needed".to_string(),
                "```python\nprint(1)\n```".to_string(),
            ]
        };
        let run = || {
            evaluate(&entries, &OrchestratorConfig::default(), |_| {
                Agents::scripted(scripts())
            })
        };
        let results = run();
        assert_eq!(results.len(), 2);
        assert!(results.iter().all(|r| r.secure && r.compiled && r.ran));
        assert_eq!(results, run());
    }

    #[test]
    fn failing_entry_does_not_abort_the_batch() {
        let entries = vec![ScenarioEntry {
            cwe: "089".into(),
            scenario: "0-py".into(),
            split: Split::Test,
            language: Language::Python,
            prompt: "remove a row".into(),
            analyzer_query: "sql-injection".into(),
        }];
        // An empty script makes planning fail immediately.
        let results = evaluate(&entries, &OrchestratorConfig::default(), |_| {
            Agents::scripted(vec![])
        });
        assert_eq!(results.len(), 1);
        assert!(!results[0].secure);
        assert!(!results[0].compiled);
    }
}
