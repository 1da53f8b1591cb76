//! CodeGen agent: assembles a generation prompt from the subtask, fused
//! evidence and feedback, queries the LLM, and later stitches validated
//! snippets into one program.

use thiserror::Error;

use crate::backends::{BackendError, ChatBackend, ChatMessage, ChatRequest, Role};
use crate::model::{CodeSnippet, DecompositionPlan, Evidence, Language, TaskSpec};
use crate::planner::FeedbackNote;
use crate::searcher::ReActEpisode;
use crate::templates::{TemplateError, TemplateSet};

pub const DEFAULT_PROMPT_CAP: usize = 12_000;

#[derive(Debug, Error)]
pub enum CodegenError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("no validated snippet for subtask {0}")]
    MissingSnippet(String),
    #[error("snippet for subtask {subtask_id} is {found}, aggregate target is {expected}")]
    LanguageMismatch {
        subtask_id: String,
        found: Language,
        expected: Language,
    },
    #[error("plan dependency graph has a cycle")]
    CyclicPlan,
}

#[derive(Debug, Clone)]
pub struct CodegenConfig {
    pub model: String,
    pub prompt_cap: usize,
}

impl Default for CodegenConfig {
    fn default() -> Self {
        CodegenConfig {
            model: "scripted".into(),
            prompt_cap: DEFAULT_PROMPT_CAP,
        }
    }
}

fn template_for(language: Language) -> &'static str {
    match language {
        Language::Python => "codegen_python",
        Language::C => "codegen_c",
        Language::Cpp => "codegen_cpp",
    }
}

fn security_directive(task: &TaskSpec) -> String {
    match &task.cwe_hint {
        Some(cwe) => format!(
            "Security requirement: the code must not be vulnerable to CWE-{cwe}. \
             Validate all untrusted input and prefer safe library APIs."
        ),
        None => "Security requirement: validate all untrusted input and prefer safe \
                 library APIs."
            .to_string(),
    }
}

fn format_evidence(evidence: &[Evidence]) -> String {
    if evidence.is_empty() {
        return "(none)".to_string();
    }
    evidence
        .iter()
        .map(|e| format!("[{} weight {:.3}] {}", e.tool, e.weight, e.payload))
        .collect::<Vec<_>>()
        .join("\n")
}

fn format_feedback(feedback: Option<&FeedbackNote>) -> String {
    match feedback {
        Some(note) => format!(
            "Previous attempt {} failed ({}): {}",
            note.attempt, note.failure_kind, note.details
        ),
        None => String::new(),
    }
}

/// Builds the generation prompt. Evidence is listed by descending weight;
/// when the prompt would exceed the cap, the lowest-weight entries are
/// dropped first.
pub fn build_prompt(
    task: &TaskSpec,
    subtask_description: &str,
    episode: &ReActEpisode,
    feedback: Option<&FeedbackNote>,
    templates: &TemplateSet,
    cfg: &CodegenConfig,
) -> Result<String, CodegenError> {
    let mut evidence: Vec<Evidence> = episode.evidence.clone();
    evidence.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.source_id.cmp(&b.source_id)));

    let language = task.target_language.to_string();
    let directive = security_directive(task);
    let feedback_text = format_feedback(feedback);
    let render = |evidence: &[Evidence]| -> Result<String, CodegenError> {
        Ok(templates.render(
            template_for(task.target_language),
            &[
                ("language", language.as_str()),
                ("subtask_description", subtask_description),
                ("summary", episode.terminal_summary.as_str()),
                ("evidence", &format_evidence(evidence)),
                ("security_directive", directive.as_str()),
                ("feedback", feedback_text.as_str()),
            ],
        )?)
    };

    let mut prompt = render(&evidence)?;
    while prompt.len() > cfg.prompt_cap && !evidence.is_empty() {
        evidence.pop();
        prompt = render(&evidence)?;
    }
    Ok(prompt)
}

/// One generation call; returns the raw model output for the extractor.
pub fn generate(
    task: &TaskSpec,
    subtask_description: &str,
    episode: &ReActEpisode,
    feedback: Option<&FeedbackNote>,
    llm: &dyn ChatBackend,
    templates: &TemplateSet,
    cfg: &CodegenConfig,
) -> Result<String, CodegenError> {
    let prompt = build_prompt(task, subtask_description, episode, feedback, templates, cfg)?;
    let response = llm.chat(&ChatRequest::new(
        cfg.model.clone(),
        vec![ChatMessage {
            role: Role::User,
            content: prompt,
        }],
    ))?;
    Ok(response.content)
}

/// Concatenates validated snippets in dependency order, each preceded by a
/// provenance comment.
pub fn aggregate(
    plan: &DecompositionPlan,
    snippets: &[CodeSnippet],
    target: Language,
) -> Result<String, AggregateError> {
    let order = plan.topological_order().ok_or(AggregateError::CyclicPlan)?;
    let mut sections = Vec::with_capacity(order.len());
    for subtask_id in &order {
        let snippet = snippets
            .iter()
            .filter(|s| &s.subtask_id == subtask_id)
            .max_by_key(|s| s.attempt)
            .ok_or_else(|| AggregateError::MissingSnippet(subtask_id.clone()))?;
        if snippet.language != target {
            return Err(AggregateError::LanguageMismatch {
                subtask_id: subtask_id.clone(),
                found: snippet.language,
                expected: target,
            });
        }
        sections.push(format!(
            "{} subtask:{} attempt:{}\n{}",
            target.line_comment(),
            snippet.subtask_id,
            snippet.attempt,
            snippet.body.trim_end()
        ));
    }
    Ok(sections.join("\n\n") + "\n")
}
