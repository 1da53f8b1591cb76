//! Shared domain types used by every agent: task specifications, plans,
//! trace primitives, evidence, snippets, and validation verdicts.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

/// Target languages the pipeline can generate and validate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Python,
    C,
    Cpp,
}

impl Language {
    pub fn from_str_loose(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "python" | "py" => Some(Language::Python),
            "c" => Some(Language::C),
            "cpp" | "c++" | "cxx" => Some(Language::Cpp),
            _ => None,
        }
    }

    /// Fence tags accepted as this language when extracting code blocks.
    pub fn matches_fence_tag(self, tag: &str) -> bool {
        Language::from_str_loose(tag) == Some(self)
    }

    pub fn line_comment(self) -> &'static str {
        match self {
            Language::Python => "#",
            Language::C | Language::Cpp => "//",
        }
    }

    pub fn file_extension(self) -> &'static str {
        match self {
            Language::Python => "py",
            Language::C => "c",
            Language::Cpp => "cpp",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Language::Python => "python",
            Language::C => "c",
            Language::Cpp => "cpp",
        };
        f.write_str(s)
    }
}

/// The four cooperating agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Planner,
    Searcher,
    Codegen,
    Extractor,
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AgentKind::Planner => "planner",
            AgentKind::Searcher => "searcher",
            AgentKind::Codegen => "codegen",
            AgentKind::Extractor => "extractor",
        };
        f.write_str(s)
    }
}

/// What to build: the high-level task handed to the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub description: String,
    pub target_language: Language,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
    #[serde(default)]
    pub cwe_hint: Option<String>,
}

impl TaskSpec {
    /// Returns violation messages; empty means the spec is well-formed.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.description.trim().is_empty() {
            out.push("task description is empty".to_string());
        }
        if self.task_id.trim().is_empty() {
            out.push("task id is empty".to_string());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtaskStatus {
    Pending,
    InProgress,
    Validated,
    Failed,
}

/// One unit of work inside a decomposition plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subtask {
    pub subtask_id: String,
    pub parent_task: String,
    pub index: usize,
    pub description: String,
    #[serde(default)]
    pub depends_on: Vec<String>,
    pub status: SubtaskStatus,
    /// How many times the planner has rewritten this subtask.
    #[serde(default)]
    pub revision: u32,
}

/// Structural form of a task split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Sequential,
    Parallel,
    Hierarchical,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompositionPlan {
    pub modality: Modality,
    pub subtasks: Vec<Subtask>,
    /// Relevance cutoff applied when the plan was built.
    pub relevance_threshold: f64,
}

impl DecompositionPlan {
    pub fn subtask(&self, id: &str) -> Option<&Subtask> {
        self.subtasks.iter().find(|s| s.subtask_id == id)
    }

    /// Subtask ids in dependency (topological) order, ties broken by index.
    ///
    /// Returns `None` when the dependency graph has a cycle.
    pub fn topological_order(&self) -> Option<Vec<String>> {
        let mut indegree: HashMap<&str, usize> = HashMap::new();
        let mut dependents: HashMap<&str, Vec<&str>> = HashMap::new();
        for s in &self.subtasks {
            indegree.entry(&s.subtask_id).or_insert(0);
            for dep in &s.depends_on {
                *indegree.entry(&s.subtask_id).or_insert(0) += 1;
                dependents.entry(dep).or_default().push(&s.subtask_id);
            }
        }
        let mut order = Vec::with_capacity(self.subtasks.len());
        let mut ready: Vec<&Subtask> = self
            .subtasks
            .iter()
            .filter(|s| indegree.get(s.subtask_id.as_str()) == Some(&0))
            .collect();
        ready.sort_by_key(|s| s.index);
        while let Some(next) = ready.first().copied() {
            ready.remove(0);
            order.push(next.subtask_id.clone());
            if let Some(deps) = dependents.get(next.subtask_id.as_str()) {
                for d in deps {
                    let e = indegree.get_mut(d).expect("indegree entry");
                    *e -= 1;
                    if *e == 0 {
                        if let Some(s) = self.subtask(d) {
                            ready.push(s);
                        }
                    }
                }
            }
            ready.sort_by_key(|s| s.index);
        }
        if order.len() == self.subtasks.len() {
            Some(order)
        } else {
            None
        }
    }
}

/// Checks every plan invariant; one message per violation.
pub fn validate_plan(plan: &DecompositionPlan) -> Vec<String> {
    let mut violations = Vec::new();
    if plan.subtasks.is_empty() {
        violations.push("plan has no subtasks".to_string());
        return violations;
    }
    if !(0.0..=1.0).contains(&plan.relevance_threshold) {
        violations.push(format!(
            "relevance threshold {} outside [0,1]",
            plan.relevance_threshold
        ));
    }

    let mut seen_indices = HashSet::new();
    let mut seen_ids = HashSet::new();
    let ids: HashSet<&str> = plan.subtasks.iter().map(|s| s.subtask_id.as_str()).collect();
    for s in &plan.subtasks {
        if !seen_indices.insert(s.index) {
            violations.push(format!("duplicate subtask index {}", s.index));
        }
        if !seen_ids.insert(s.subtask_id.as_str()) {
            violations.push(format!("duplicate subtask id {}", s.subtask_id));
        }
        if s.description.trim().is_empty() {
            violations.push(format!("subtask {} has empty description", s.subtask_id));
        }
        for dep in &s.depends_on {
            if !ids.contains(dep.as_str()) {
                violations.push(format!(
                    "subtask {} depends on unknown subtask {dep}",
                    s.subtask_id
                ));
            }
            if dep == &s.subtask_id {
                violations.push(format!("subtask {} depends on itself", s.subtask_id));
            }
        }
    }

    if plan.topological_order().is_none() {
        violations.push("dependency cycle detected".to_string());
    }

    match plan.modality {
        Modality::Parallel => {
            if plan.subtasks.iter().any(|s| !s.depends_on.is_empty()) {
                violations.push("parallel plan has dependency".to_string());
            }
        }
        Modality::Sequential => {
            // Linear chain: ordered by index, each subtask depends exactly on
            // its predecessor and the first on nothing.
            let mut ordered: Vec<&Subtask> = plan.subtasks.iter().collect();
            ordered.sort_by_key(|s| s.index);
            for (pos, s) in ordered.iter().enumerate() {
                let ok = if pos == 0 {
                    s.depends_on.is_empty()
                } else {
                    s.depends_on.len() == 1 && s.depends_on[0] == ordered[pos - 1].subtask_id
                };
                if !ok {
                    violations.push("sequential plan is not a linear chain".to_string());
                    break;
                }
            }
        }
        Modality::Hierarchical => {}
    }
    violations
}

/// One reasoning utterance in a ReAct trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub step_index: usize,
    pub agent: AgentKind,
    pub thought: String,
    /// Milliseconds since run start (logical clock).
    pub wall_ms: u64,
}

/// One tool invocation and its observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub step_index: usize,
    pub tool: String,
    pub input: String,
    pub observation: String,
    pub elapsed_ms: u64,
    pub ok: bool,
}

/// External information gathered during search, weighted during fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub source_id: usize,
    pub tool: String,
    pub payload: String,
    pub relevance: f64,
    /// Normalized weight in [0,1]; filled by `fuse_evidence`.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeSnippet {
    pub subtask_id: String,
    pub attempt: u32,
    pub language: Language,
    pub body: String,
    pub fenced_origin: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
    Note,
}

impl Severity {
    /// Unknown analyzer levels map to `Warning`.
    pub fn from_level(level: &str) -> Self {
        match level.to_ascii_lowercase().as_str() {
            "error" => Severity::Error,
            "note" => Severity::Note,
            _ => Severity::Warning,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzerFinding {
    pub rule_id: String,
    pub severity: Severity,
    pub file: String,
    pub line: u32,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    FunctionalFail,
    SecurityFail,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Verdict::Pass => "pass",
            Verdict::FunctionalFail => "functional_fail",
            Verdict::SecurityFail => "security_fail",
        };
        f.write_str(s)
    }
}

/// Total, deterministic verdict rule over the validation outcome.
pub fn verdict_for(compiled: bool, ran: bool, findings: &[AnalyzerFinding]) -> Verdict {
    if compiled && ran && findings.is_empty() {
        Verdict::Pass
    } else if compiled && ran {
        Verdict::SecurityFail
    } else {
        Verdict::FunctionalFail
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Subtask id, or "final" for the aggregated program.
    pub subject: String,
    pub compiled: bool,
    pub ran: bool,
    pub findings: Vec<AnalyzerFinding>,
    pub verdict: Verdict,
    /// Head of compiler/runtime stderr, for feedback and knowledge items.
    #[serde(default)]
    pub stderr_head: String,
}

impl ValidationReport {
    pub fn new(subject: impl Into<String>, compiled: bool, ran: bool, findings: Vec<AnalyzerFinding>) -> Self {
        let verdict = verdict_for(compiled, ran, &findings);
        ValidationReport {
            subject: subject.into(),
            compiled,
            ran,
            findings,
            verdict,
            stderr_head: String::new(),
        }
    }

    pub fn with_stderr(mut self, stderr_head: impl Into<String>) -> Self {
        self.stderr_head = stderr_head.into();
        self
    }
}

/// A distilled lesson fed back into planning prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub text: String,
    pub tags: Vec<String>,
    pub source_subtask: String,
    pub created_at_step: u64,
}

static RUN_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Unique, lexically sortable run identifier: zero-padded epoch millis plus a
/// process-wide monotone counter.
pub fn new_run_id() -> String {
    let millis = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0);
    let n = RUN_COUNTER.fetch_add(1, Ordering::Relaxed);
    format!("{millis:015}-{n:08}")
}
