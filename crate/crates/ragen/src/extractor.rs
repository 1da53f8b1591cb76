//! Extractor agent: pulls fenced code blocks out of raw model output,
//! validates snippets through the sandbox and analyzer, and distills
//! knowledge items that flow back to the planner.

use std::collections::HashSet;

use thiserror::Error;

use crate::backends::analyzer::{Analyzer, AnalyzerError};
use crate::backends::sandbox::{SandboxError, SandboxRunner};
use crate::model::{CodeSnippet, KnowledgeItem, Language, ValidationReport, Verdict};

#[derive(Debug, Error)]
pub enum ExtractorError {
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Analyzer(#[from] AnalyzerError),
}

/// Every triple-backtick fenced block in `raw`, in document order, as
/// `(fence tag, body)`. An unterminated fence is not a block.
pub fn fenced_blocks(raw: &str) -> Vec<(Option<String>, String)> {
    let mut blocks = Vec::new();
    let mut current: Option<(Option<String>, Vec<&str>)> = None;
    for line in raw.lines() {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix("```") {
            match current.take() {
                Some((tag, body_lines)) => {
                    blocks.push((tag, body_lines.join("\n")));
                }
                None => {
                    let tag = rest.trim();
                    let tag = if tag.is_empty() {
                        None
                    } else {
                        Some(tag.to_string())
                    };
                    current = Some((tag, Vec::new()));
                }
            }
        } else if let Some((_, body_lines)) = current.as_mut() {
            body_lines.push(line);
        }
    }
    blocks
}

/// Wraps a body in a fence with the given tag.
pub fn fence(tag: &str, body: &str) -> String {
    format!("```{tag}\n{body}\n```")
}

/// Extracts candidate snippets for `expected_language`: tagged blocks whose
/// tag conflicts with the language are excluded, untagged blocks are kept.
pub fn extract_code(raw: &str, expected_language: Language) -> Vec<CodeSnippet> {
    fenced_blocks(raw)
        .into_iter()
        .filter(|(tag, body)| {
            !body.trim().is_empty()
                && match tag {
                    Some(tag) => expected_language.matches_fence_tag(tag),
                    None => true,
                }
        })
        .map(|(_tag, body)| CodeSnippet {
            subtask_id: String::new(),
            attempt: 1,
            language: expected_language,
            body,
            fenced_origin: true,
        })
        .collect()
}

/// Compile, run, analyze — later stages are skipped once one fails.
pub fn validate_snippet(
    snippet: &CodeSnippet,
    sandbox: &dyn SandboxRunner,
    analyzer: &dyn Analyzer,
    timeout_ms: u64,
    query_pack: &str,
) -> Result<ValidationReport, ExtractorError> {
    let outcome = sandbox.run(snippet, timeout_ms)?;
    if !(outcome.compiled && outcome.ran) {
        return Ok(
            ValidationReport::new(snippet.subtask_id.clone(), outcome.compiled, false, vec![])
                .with_stderr(outcome.stderr_head),
        );
    }
    let dir = tempfile::tempdir().map_err(|e| {
        ExtractorError::Sandbox(SandboxError::Unavailable(format!("tempdir: {e}")))
    })?;
    let source = dir
        .path()
        .join(format!("main.{}", snippet.language.file_extension()));
    std::fs::write(&source, &snippet.body).map_err(|e| {
        ExtractorError::Sandbox(SandboxError::Unavailable(format!("write source: {e}")))
    })?;
    let findings = analyzer.analyze(dir.path(), snippet.language, query_pack)?;
    Ok(
        ValidationReport::new(snippet.subtask_id.clone(), true, true, findings)
            .with_stderr(outcome.stderr_head),
    )
}

/// Distills lessons from a validation outcome.
pub fn extract_knowledge(
    report: &ValidationReport,
    snippet: &CodeSnippet,
    created_at_step: u64,
) -> Vec<KnowledgeItem> {
    let language_tag = snippet.language.to_string();
    match report.verdict {
        Verdict::Pass => vec![KnowledgeItem {
            text: format!("pattern succeeded for {}", report.subject),
            tags: vec![language_tag],
            source_subtask: report.subject.clone(),
            created_at_step,
        }],
        Verdict::SecurityFail => {
            let mut seen = HashSet::new();
            report
                .findings
                .iter()
                .filter(|f| seen.insert(f.rule_id.clone()))
                .map(|f| KnowledgeItem {
                    text: format!("avoid {}: {}", f.rule_id, f.message),
                    tags: vec![language_tag.clone(), f.rule_id.clone()],
                    source_subtask: report.subject.clone(),
                    created_at_step,
                })
                .collect()
        }
        Verdict::FunctionalFail => {
            let head = report
                .stderr_head
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("build or run failed");
            vec![KnowledgeItem {
                text: format!("fix error: {head}"),
                tags: vec![language_tag],
                source_subtask: report.subject.clone(),
                created_at_step,
            }]
        }
    }
}

/// Deduplicating knowledge store; the dedup key is (tag set, text).
#[derive(Debug, Default, Clone)]
pub struct KnowledgeStore {
    items: Vec<KnowledgeItem>,
    seen: HashSet<(Vec<String>, String)>,
}

impl KnowledgeStore {
    pub fn new() -> Self {
        KnowledgeStore::default()
    }

    /// Returns true when the item was new.
    pub fn add(&mut self, item: KnowledgeItem) -> bool {
        let mut tags = item.tags.clone();
        tags.sort();
        if self.seen.insert((tags, item.text.clone())) {
            self.items.push(item);
            true
        } else {
            false
        }
    }

    pub fn items(&self) -> &[KnowledgeItem] {
        &self.items
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::analyzer::{QueueAnalyzer, StaticAnalyzer};
    use crate::backends::sandbox::{ProcessSandbox, StaticSandbox, toolchain_available};
    use crate::model::{AnalyzerFinding, Severity};

    fn snippet(language: Language, body: &str) -> CodeSnippet {
        CodeSnippet {
            subtask_id: "s1".into(),
            attempt: 1,
            language,
            body: body.into(),
            fenced_origin: true,
        }
    }

    fn finding(rule: &str, message: &str) -> AnalyzerFinding {
        AnalyzerFinding {
            rule_id: rule.into(),
            severity: Severity::Error,
            file: "main.py".into(),
            line: 1,
            message: message.into(),
        }
    }

    #[test]
    fn single_block_parses() {
        let snippets = extract_code("```python\nprint(1)\n```", Language::Python);
        assert_eq!(snippets.len(), 1);
        assert_eq!(snippets[0].body, "print(1)");
    }

    #[test]
    fn prose_without_fences_yields_nothing() {
        assert!(extract_code("no code here, just words", Language::Python).is_empty());
    }

    #[test]
    fn conflicting_tags_are_excluded_in_order() {
        let raw = "first:\n```python\na = 1\n```\nthen c:\n```c\nint x;\n```\nmore:\n```py\nb = 2\n```";
        let snippets = extract_code(raw, Language::Python);
        assert_eq!(snippets.len(), 2);
        assert_eq!(snippets[0].body, "a = 1");
        assert_eq!(snippets[1].body, "b = 2");
    }

    #[test]
    fn untagged_blocks_are_included() {
        let snippets = extract_code("```\nx = 1\n```", Language::Python);
        assert_eq!(snippets.len(), 1);
    }

    #[test]
    fn fence_round_trip() {
        let body = "def f():\n    return 1";
        let snippets = extract_code(&fence("python", body), Language::Python);
        assert_eq!(snippets.len(), 1);
        assert_eq!(snippets[0].body, body);
    }

    #[test]
    fn validate_pass_with_real_sandbox() {
        if !toolchain_available(Language::Python) {
            eprintln!("SKIP: python3 not available");
            return;
        }
        let report = validate_snippet(
            &snippet(Language::Python, "print(1)\n"),
            &ProcessSandbox::new(),
            &StaticAnalyzer::clean(),
            10_000,
            "security",
        )
        .unwrap();
        assert!(report.compiled);
        assert!(report.ran);
        assert_eq!(report.verdict, Verdict::Pass);
    }

    #[test]
    fn broken_c_is_functional_fail() {
        if !toolchain_available(Language::C) {
            eprintln!("SKIP: cc not available");
            return;
        }
        let report = validate_snippet(
            &snippet(Language::C, "int main( {\n"),
            &ProcessSandbox::new(),
            &StaticAnalyzer::clean(),
            10_000,
            "security",
        )
        .unwrap();
        assert!(!report.compiled);
        assert!(!report.ran);
        assert_eq!(report.verdict, Verdict::FunctionalFail);
        assert!(report.findings.is_empty());
    }

    #[test]
    fn analyzer_finding_means_security_fail() {
        let report = validate_snippet(
            &snippet(Language::Python, "print(1)"),
            &StaticSandbox::passing(),
            &QueueAnalyzer::new(vec![vec![finding("py/sql-injection", "tainted query")]]),
            10_000,
            "security",
        )
        .unwrap();
        assert_eq!(report.verdict, Verdict::SecurityFail);
        assert_eq!(report.findings.len(), 1);
    }

    #[test]
    fn stage_ordering_invariant() {
        // ran implies compiled; findings imply compiled.
        let report = ValidationReport::new("s1", false, false, vec![]);
        assert!(!report.ran || report.compiled);
        assert!(report.findings.is_empty() || report.compiled);
    }

    #[test]
    fn knowledge_from_pass() {
        let report = ValidationReport::new("s1", true, true, vec![]);
        let items = extract_knowledge(&report, &snippet(Language::Python, "x"), 3);
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].text, "pattern succeeded for s1");
    }

    #[test]
    fn knowledge_dedups_rule_ids() {
        let report = ValidationReport::new(
            "s1",
            true,
            true,
            vec![
                finding("cwe-089", "a"),
                finding("cwe-089", "b"),
                finding("cwe-022", "c"),
            ],
        );
        let items = extract_knowledge(&report, &snippet(Language::Python, "x"), 0);
        assert_eq!(items.len(), 2);
        // Bounded by 1 + distinct rule ids.
        assert!(items.len() <= 3);
    }

    #[test]
    fn knowledge_from_functional_fail_quotes_stderr() {
        let report = ValidationReport::new("s1", false, false, vec![])
            .with_stderr("SyntaxError: invalid syntax\nmore noise");
        let items = extract_knowledge(&report, &snippet(Language::Python, "x"), 0);
        assert_eq!(items.len(), 1);
        assert!(items[0].text.contains("SyntaxError: invalid syntax"));
    }

    #[test]
    fn store_skips_duplicates() {
        let mut store = KnowledgeStore::new();
        let item = KnowledgeItem {
            text: "avoid cwe-089: tainted".into(),
            tags: vec!["python".into(), "cwe-089".into()],
            source_subtask: "s1".into(),
            created_at_step: 0,
        };
        assert!(store.add(item.clone()));
        assert!(!store.add(item));
        assert_eq!(store.items().len(), 1);
    }
}
