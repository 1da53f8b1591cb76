//! Planner agent: decomposes a task into a plan through a structured LLM
//! prompt, selects the modality, and revises failing subtasks on feedback.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatBackend, ChatMessage, ChatRequest, Role};
use crate::extractor::fenced_blocks;
use crate::model::{
    validate_plan, DecompositionPlan, KnowledgeItem, Modality, Subtask, SubtaskStatus, TaskSpec,
};
use crate::templates::{TemplateError, TemplateSet};

pub const DEFAULT_RELEVANCE_THRESHOLD: f64 = 0.2;
pub const DEFAULT_MAX_PARSE_RETRIES: usize = 2;
pub const DEFAULT_FEEDBACK_CAP: usize = 2000;
const LESSONS_CAP: usize = 10;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("no parseable plan after {attempts} attempts")]
    MalformedPlan { attempts: usize },
    #[error("feedback references unknown subtask {0}")]
    UnknownSubtask(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    FunctionalFail,
    SecurityFail,
    ExtractionFail,
}

impl std::fmt::Display for FailureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FailureKind::FunctionalFail => "functional_fail",
            FailureKind::SecurityFail => "security_fail",
            FailureKind::ExtractionFail => "extraction_fail",
        };
        f.write_str(s)
    }
}

/// Validation feedback routed back to the planner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackNote {
    pub subtask_id: String,
    pub attempt: u32,
    pub failure_kind: FailureKind,
    pub details: String,
}

impl FeedbackNote {
    /// Details are truncated to `cap` characters.
    pub fn new(
        subtask_id: impl Into<String>,
        attempt: u32,
        failure_kind: FailureKind,
        details: impl Into<String>,
        cap: usize,
    ) -> Self {
        let mut details: String = details.into();
        if details.len() > cap {
            let mut end = cap;
            while !details.is_char_boundary(end) {
                end -= 1;
            }
            details.truncate(end);
        }
        FeedbackNote {
            subtask_id: subtask_id.into(),
            attempt,
            failure_kind,
            details,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlannerConfig {
    pub model: String,
    pub relevance_threshold: f64,
    pub max_parse_retries: usize,
    pub feedback_cap: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            model: "scripted".into(),
            relevance_threshold: DEFAULT_RELEVANCE_THRESHOLD,
            max_parse_retries: DEFAULT_MAX_PARSE_RETRIES,
            feedback_cap: DEFAULT_FEEDBACK_CAP,
        }
    }
}

/// One parsed line of the structured plan block.
#[derive(Debug, Clone, PartialEq)]
struct PlanEntry {
    index: usize,
    relevance: f64,
    depends_on: Vec<usize>,
    independent: bool,
    description: String,
}

fn parse_plan_block(raw: &str) -> Option<Vec<PlanEntry>> {
    let block = fenced_blocks(raw)
        .into_iter()
        .find(|(tag, _)| tag.as_deref() == Some("plan"))?
        .1;
    let mut entries = Vec::new();
    for line in block.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('|').map(str::trim).collect();
        if fields.len() != 5 {
            return None;
        }
        let index: usize = fields[0].parse().ok()?;
        let relevance: f64 = fields[1].parse().ok()?;
        let depends_on = if fields[2] == "-" || fields[2].is_empty() {
            Vec::new()
        } else {
            fields[2]
                .split(',')
                .map(|d| d.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .ok()?
        };
        let independent = matches!(fields[3].to_ascii_lowercase().as_str(), "yes" | "true");
        let description = fields[4].to_string();
        if description.is_empty() {
            return None;
        }
        entries.push(PlanEntry {
            index,
            relevance,
            depends_on,
            independent,
            description,
        });
    }
    if entries.is_empty() {
        None
    } else {
        Some(entries)
    }
}

/// Deterministic modality rule: one subtask is sequential; declared
/// dependencies make the plan hierarchical; a fully independent set is
/// parallel; everything else defaults to sequential.
pub fn select_modality(
    subtask_count: usize,
    has_declared_dependencies: bool,
    all_independent: bool,
) -> Modality {
    if subtask_count <= 1 {
        Modality::Sequential
    } else if has_declared_dependencies {
        Modality::Hierarchical
    } else if all_independent {
        Modality::Parallel
    } else {
        Modality::Sequential
    }
}

fn build_plan(task: &TaskSpec, mut entries: Vec<PlanEntry>, threshold: f64) -> DecompositionPlan {
    entries.sort_by_key(|e| e.index);
    // Relevance filter; never empty.
    let kept: Vec<PlanEntry> = {
        let filtered: Vec<PlanEntry> = entries
            .iter()
            .filter(|e| e.relevance >= threshold)
            .cloned()
            .collect();
        if filtered.is_empty() {
            let best = entries
                .iter()
                .cloned()
                .max_by(|a, b| a.relevance.total_cmp(&b.relevance))
                .expect("entries non-empty");
            vec![best]
        } else {
            filtered
        }
    };

    let has_deps = kept.iter().any(|e| !e.depends_on.is_empty());
    let all_independent = kept.iter().all(|e| e.independent);
    let modality = select_modality(kept.len(), has_deps, all_independent);

    let id_for = |position: usize| format!("{}-s{}", task.task_id, position + 1);
    let kept_indices: Vec<usize> = kept.iter().map(|e| e.index).collect();
    let mut subtasks: Vec<Subtask> = kept
        .iter()
        .enumerate()
        .map(|(position, entry)| {
            let depends_on = match modality {
                Modality::Sequential | Modality::Parallel => Vec::new(),
                Modality::Hierarchical => entry
                    .depends_on
                    .iter()
                    .filter_map(|d| kept_indices.iter().position(|k| k == d))
                    .map(id_for)
                    .collect(),
            };
            Subtask {
                subtask_id: id_for(position),
                parent_task: task.task_id.clone(),
                index: position,
                description: entry.description.clone(),
                depends_on,
                status: SubtaskStatus::Pending,
                revision: 0,
            }
        })
        .collect();
    if modality == Modality::Sequential {
        chain_dependencies(&mut subtasks);
    }
    DecompositionPlan {
        modality,
        subtasks,
        relevance_threshold: threshold,
    }
}

fn chain_dependencies(subtasks: &mut [Subtask]) {
    subtasks.sort_by_key(|s| s.index);
    let ids: Vec<String> = subtasks.iter().map(|s| s.subtask_id.clone()).collect();
    for (position, subtask) in subtasks.iter_mut().enumerate() {
        subtask.depends_on = if position == 0 {
            Vec::new()
        } else {
            vec![ids[position - 1].clone()]
        };
    }
}

fn format_lessons(knowledge: &[KnowledgeItem]) -> String {
    if knowledge.is_empty() {
        return "(none)".to_string();
    }
    knowledge
        .iter()
        .rev()
        .take(LESSONS_CAP)
        .rev()
        .map(|k| format!("- {}", k.text))
        .collect::<Vec<_>>()
        .join("\n")
}

fn format_list(items: &[String]) -> String {
    if items.is_empty() {
        "(none)".to_string()
    } else {
        items
            .iter()
            .map(|i| format!("- {i}"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn ask_for_plan(
    llm: &dyn ChatBackend,
    cfg: &PlannerConfig,
    prompt: String,
) -> Result<Vec<PlanEntry>, PlannerError> {
    let mut messages = vec![ChatMessage {
        role: Role::User,
        content: prompt,
    }];
    let mut attempts = 0;
    loop {
        attempts += 1;
        let response = llm.chat(&ChatRequest::new(cfg.model.clone(), messages.clone()))?;
        if let Some(entries) = parse_plan_block(&response.content) {
            return Ok(entries);
        }
        if attempts > cfg.max_parse_retries {
            return Err(PlannerError::MalformedPlan { attempts });
        }
        messages.push(ChatMessage {
            role: Role::Assistant,
            content: response.content,
        });
        messages.push(ChatMessage {
            role: Role::User,
            content: "Your reply did not contain a parseable plan block. Reply with a fenced \
                      block tagged plan, one line per subtask: <index> | <relevance> | \
                      <depends or -> | <independent yes/no> | <description>."
                .to_string(),
        });
    }
}

/// Decomposes a task into a validated plan.
pub fn decompose(
    task: &TaskSpec,
    knowledge: &[KnowledgeItem],
    llm: &dyn ChatBackend,
    templates: &TemplateSet,
    cfg: &PlannerConfig,
) -> Result<DecompositionPlan, PlannerError> {
    let language = task.target_language.to_string();
    let prompt = templates.render(
        "decompose",
        &[
            ("task_description", task.description.as_str()),
            ("language", language.as_str()),
            ("inputs", &format_list(&task.inputs)),
            ("outputs", &format_list(&task.outputs)),
            ("lessons", &format_lessons(knowledge)),
            ("feedback", ""),
        ],
    )?;
    let entries = ask_for_plan(llm, cfg, prompt)?;
    let plan = build_plan(task, entries, cfg.relevance_threshold);
    debug_assert!(validate_plan(&plan).is_empty(), "{:?}", validate_plan(&plan));
    Ok(plan)
}

/// Rewrites the failed subtask (optionally splitting it); other subtasks keep
/// their identity.
pub fn revise(
    plan: &DecompositionPlan,
    task: &TaskSpec,
    feedback: &FeedbackNote,
    llm: &dyn ChatBackend,
    templates: &TemplateSet,
    cfg: &PlannerConfig,
) -> Result<DecompositionPlan, PlannerError> {
    let failed = plan
        .subtask(&feedback.subtask_id)
        .ok_or_else(|| PlannerError::UnknownSubtask(feedback.subtask_id.clone()))?
        .clone();
    let failure_kind = feedback.failure_kind.to_string();
    let attempt = feedback.attempt.to_string();
    let prompt = templates.render(
        "revise",
        &[
            ("task_description", task.description.as_str()),
            ("subtask_id", feedback.subtask_id.as_str()),
            ("attempt", attempt.as_str()),
            ("subtask_description", failed.description.as_str()),
            ("failure_kind", failure_kind.as_str()),
            ("details", feedback.details.as_str()),
        ],
    )?;
    let mut entries = ask_for_plan(llm, cfg, prompt)?;
    entries.sort_by_key(|e| e.index);

    let mut revised = plan.clone();
    let position = revised
        .subtasks
        .iter()
        .position(|s| s.subtask_id == feedback.subtask_id)
        .expect("checked above");
    revised.subtasks[position].description = entries[0].description.clone();
    revised.subtasks[position].revision += 1;
    revised.subtasks[position].status = SubtaskStatus::Pending;

    // Extra entries become children inserted right after the failed subtask,
    // chained behind it.
    let mut previous_id = revised.subtasks[position].subtask_id.clone();
    for (n, entry) in entries.iter().skip(1).enumerate() {
        let child = Subtask {
            subtask_id: format!("{}.{}", feedback.subtask_id, n + 1),
            parent_task: task.task_id.clone(),
            index: 0,
            description: entry.description.clone(),
            depends_on: vec![previous_id.clone()],
            status: SubtaskStatus::Pending,
            revision: 0,
        };
        previous_id = child.subtask_id.clone();
        revised.subtasks.insert(position + 1 + n, child);
    }
    if entries.len() > 1 {
        // Dependents of the failed subtask now wait for its last child.
        let failed_id = feedback.subtask_id.clone();
        for s in revised.subtasks.iter_mut() {
            if s.subtask_id != previous_id
                && !s.subtask_id.starts_with(&format!("{failed_id}."))
                && s.subtask_id != failed_id
            {
                for dep in s.depends_on.iter_mut() {
                    if *dep == failed_id {
                        *dep = previous_id.clone();
                    }
                }
            }
        }
    }
    // Reindex in current order; sequential plans keep their linear chain.
    for (position, s) in revised.subtasks.iter_mut().enumerate() {
        s.index = position;
    }
    if revised.modality == Modality::Sequential {
        chain_dependencies(&mut revised.subtasks);
    }
    Ok(revised)
}
