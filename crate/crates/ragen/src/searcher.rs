//! ReAct loop for a subtask: reason, optionally act through a tool, observe,
//! repeat until a findings summary is emitted or the step budget runs out.
//! Also fuses multi-source evidence into normalized weights.

use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::backends::{BackendError, ChatBackend, ChatMessage, ChatRequest, Role};
use crate::clock::Clock;
use crate::model::{ActionRecord, AgentKind, Evidence, ReasoningStep, Subtask};
use crate::templates::{TemplateError, TemplateSet};

pub const DEFAULT_STEP_BUDGET: usize = 6;
pub const DEFAULT_OBSERVATION_CAP: usize = 4000;

/// Directive re-asks before giving up: one corrective retry.
const DIRECTIVE_REASKS: usize = 1;

#[derive(Debug, Error)]
pub enum SearcherError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("no recognizable directive after {attempts} attempts")]
    DirectiveParse { attempts: usize },
    #[error("unknown tool: {0}")]
    UnknownTool(String),
    #[error("duplicate tool name: {0}")]
    DuplicateTool(String),
    #[error("evidence list is empty")]
    EmptyEvidence,
}

#[derive(Debug, Error)]
pub enum ToolError {
    #[error("tool unavailable: {0}")]
    Unavailable(String),
}

/// What a tool returns: an observation plus a self-reported relevance score.
#[derive(Debug, Clone)]
pub struct ToolOutput {
    pub text: String,
    pub relevance: f64,
}

pub trait Tool: Send + Sync {
    fn run(&self, input: &str) -> Result<ToolOutput, ToolError>;
}

#[derive(Debug, Clone)]
pub struct ToolDescriptor {
    pub name: String,
    pub description: String,
    pub timeout_ms: u64,
    pub enabled: bool,
}

/// Read-only during runs; names are unique.
#[derive(Default, Clone)]
pub struct ToolRegistry {
    entries: Vec<(ToolDescriptor, Arc<dyn Tool>)>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        ToolRegistry::default()
    }

    pub fn register(
        &mut self,
        descriptor: ToolDescriptor,
        tool: Arc<dyn Tool>,
    ) -> Result<(), SearcherError> {
        if self.entries.iter().any(|(d, _)| d.name == descriptor.name) {
            return Err(SearcherError::DuplicateTool(descriptor.name));
        }
        self.entries.push((descriptor, tool));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&(ToolDescriptor, Arc<dyn Tool>)> {
        self.entries
            .iter()
            .find(|(d, _)| d.name == name && d.enabled)
    }

    /// Prompt-facing tool list.
    pub fn describe(&self) -> String {
        if self.entries.is_empty() {
            return "(no tools available)".to_string();
        }
        self.entries
            .iter()
            .filter(|(d, _)| d.enabled)
            .map(|(d, _)| format!("- {}: {}", d.name, d.description))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Parsed searcher directive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Directive {
    Act { tool: String, input: String },
    Finish { summary: String },
}

/// Parses the ReAct grammar: a `Thought:` line followed by either
/// `Action: <tool>[<input>]` or `Final: <summary>`.
pub fn parse_directive(text: &str) -> Option<(String, Directive)> {
    let mut thought: Option<String> = None;
    for line in text.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("Thought:") {
            if thought.is_none() {
                thought = Some(rest.trim().to_string());
            }
        } else if let Some(rest) = line.strip_prefix("Action:") {
            let rest = rest.trim();
            let open = rest.find('[')?;
            let close = rest.rfind(']')?;
            if close < open {
                return None;
            }
            let tool = rest[..open].trim().to_string();
            if tool.is_empty() {
                return None;
            }
            let input = rest[open + 1..close].to_string();
            return Some((thought.unwrap_or_default(), Directive::Act { tool, input }));
        } else if let Some(rest) = line.strip_prefix("Final:") {
            return Some((
                thought.unwrap_or_default(),
                Directive::Finish {
                    summary: rest.trim().to_string(),
                },
            ));
        }
    }
    None
}

/// Canonical textual form of a (thought, directive) pair.
pub fn render_directive(thought: &str, directive: &Directive) -> String {
    match directive {
        Directive::Act { tool, input } => format!("Thought: {thought}\nAction: {tool}[{input}]"),
        Directive::Finish { summary } => format!("Thought: {thought}\nFinal: {summary}"),
    }
}

/// One reasoning step with its optional action and diagnostic reward.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStep {
    pub reasoning: ReasoningStep,
    pub action: Option<ActionRecord>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReActEpisode {
    pub subtask_id: String,
    pub steps: Vec<EpisodeStep>,
    pub terminal_summary: String,
    pub step_budget: usize,
    pub budget_exhausted: bool,
    /// Raw evidence gathered from successful actions; weights filled later.
    pub evidence: Vec<Evidence>,
}

#[derive(Debug, Clone)]
pub struct SearcherConfig {
    pub model: String,
    pub step_budget: usize,
    pub observation_cap: usize,
}

impl Default for SearcherConfig {
    fn default() -> Self {
        SearcherConfig {
            model: "scripted".into(),
            step_budget: DEFAULT_STEP_BUDGET,
            observation_cap: DEFAULT_OBSERVATION_CAP,
        }
    }
}

fn render_history(steps: &[EpisodeStep]) -> String {
    if steps.is_empty() {
        return "(none)".to_string();
    }
    let mut out = String::new();
    for step in steps {
        out.push_str(&format!("Thought: {}\n", step.reasoning.thought));
        if let Some(action) = &step.action {
            out.push_str(&format!(
                "Action: {}[{}]\nObservation: {}\n",
                action.tool, action.input, action.observation
            ));
        }
    }
    out
}

/// One reasoning turn: prompt the model, parse the directive, re-ask once on
/// a malformed reply.
pub fn reason_step(
    subtask: &Subtask,
    steps_so_far: &[EpisodeStep],
    registry: &ToolRegistry,
    llm: &dyn ChatBackend,
    templates: &TemplateSet,
    cfg: &SearcherConfig,
    step_index: usize,
    clock: &dyn Clock,
) -> Result<(ReasoningStep, Directive), SearcherError> {
    let prompt = templates.render(
        "react",
        &[
            ("subtask_description", subtask.description.as_str()),
            ("tools", &registry.describe()),
            ("history", &render_history(steps_so_far)),
        ],
    )?;
    let mut messages = vec![ChatMessage {
        role: Role::User,
        content: prompt,
    }];
    let mut attempts = 0;
    loop {
        attempts += 1;
        let response = llm.chat(&ChatRequest::new(cfg.model.clone(), messages.clone()))?;
        if let Some((thought, directive)) = parse_directive(&response.content) {
            let reasoning = ReasoningStep {
                step_index,
                agent: AgentKind::Searcher,
                thought,
                wall_ms: clock.now_ms(),
            };
            return Ok((reasoning, directive));
        }
        if attempts > DIRECTIVE_REASKS {
            return Err(SearcherError::DirectiveParse { attempts });
        }
        messages.push(ChatMessage {
            role: Role::Assistant,
            content: response.content,
        });
        messages.push(ChatMessage {
            role: Role::User,
            content: "Your reply did not follow the format. Answer with a Thought: line \
                      followed by Action: <tool>[<input>] or Final: <summary>."
                .to_string(),
        });
    }
}

fn truncate_observation(mut text: String, cap: usize) -> String {
    if text.len() > cap {
        let mut end = cap;
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        text.truncate(end);
    }
    text
}

fn act_with_relevance(
    tool_name: &str,
    input: &str,
    registry: &ToolRegistry,
    clock: &dyn Clock,
    observation_cap: usize,
    step_index: usize,
) -> Result<(ActionRecord, f64), SearcherError> {
    let (descriptor, tool) = registry
        .get(tool_name)
        .ok_or_else(|| SearcherError::UnknownTool(tool_name.to_string()))?;

    let tool = Arc::clone(tool);
    let owned_input = input.to_string();
    let (sender, receiver) = mpsc::channel();
    let started = Instant::now();
    std::thread::spawn(move || {
        let _ = sender.send(tool.run(&owned_input));
    });

    let (observation, ok, relevance, timed_out) =
        match receiver.recv_timeout(Duration::from_millis(descriptor.timeout_ms)) {
            Ok(Ok(output)) => (output.text, true, output.relevance, false),
            Ok(Err(e)) => (e.to_string(), false, 0.0, false),
            Err(_) => ("timeout".to_string(), false, 0.0, true),
        };
    let measured = started.elapsed().as_millis() as u64;
    // Logical time for simulated runs so traces replay byte-identically.
    let elapsed_ms = if clock.is_simulated() {
        if timed_out { descriptor.timeout_ms } else { 0 }
    } else {
        measured
    };
    clock.advance(elapsed_ms);
    let record = ActionRecord {
        step_index,
        tool: tool_name.to_string(),
        input: input.to_string(),
        observation: truncate_observation(observation, observation_cap),
        elapsed_ms,
        ok,
    };
    Ok((record, relevance))
}

/// Executes an `Act` directive against the registry, enforcing the tool's
/// timeout.
pub fn act_step(
    tool: &str,
    input: &str,
    registry: &ToolRegistry,
    clock: &dyn Clock,
    observation_cap: usize,
    step_index: usize,
) -> Result<ActionRecord, SearcherError> {
    act_with_relevance(tool, input, registry, clock, observation_cap, step_index)
        .map(|(record, _)| record)
}

/// Diagnostic reward: logged only, never used for control.
pub fn score_action(record: &ActionRecord) -> f64 {
    if !record.ok {
        -1.0
    } else if record.observation.is_empty() {
        0.0
    } else {
        1.0
    }
}

/// Softmax over relevance scores, max-subtracted for shift invariance.
pub fn fuse_evidence(mut evidence: Vec<Evidence>) -> Result<Vec<Evidence>, SearcherError> {
    if evidence.is_empty() {
        return Err(SearcherError::EmptyEvidence);
    }
    let max = evidence
        .iter()
        .map(|e| e.relevance)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = evidence.iter().map(|e| (e.relevance - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    for (e, exp) in evidence.iter_mut().zip(exps) {
        e.weight = exp / total;
    }
    Ok(evidence)
}

/// Runs the full ReAct loop for one subtask.
pub fn run_episode(
    subtask: &Subtask,
    llm: &dyn ChatBackend,
    registry: &ToolRegistry,
    templates: &TemplateSet,
    cfg: &SearcherConfig,
    clock: &dyn Clock,
) -> Result<ReActEpisode, SearcherError> {
    let mut episode = ReActEpisode {
        subtask_id: subtask.subtask_id.clone(),
        steps: Vec::new(),
        terminal_summary: String::new(),
        step_budget: cfg.step_budget,
        budget_exhausted: false,
        evidence: Vec::new(),
    };
    for step_index in 0..cfg.step_budget {
        let (reasoning, directive) = reason_step(
            subtask,
            &episode.steps,
            registry,
            llm,
            templates,
            cfg,
            step_index,
            clock,
        )?;
        match directive {
            Directive::Finish { summary } => {
                episode.steps.push(EpisodeStep {
                    reasoning,
                    action: None,
                    reward: 0.0,
                });
                episode.terminal_summary = summary;
                return Ok(episode);
            }
            Directive::Act { tool, input } => {
                let (record, relevance) = act_with_relevance(
                    &tool,
                    &input,
                    registry,
                    clock,
                    cfg.observation_cap,
                    step_index,
                )?;
                if record.ok && !record.observation.is_empty() {
                    episode.evidence.push(Evidence {
                        source_id: episode.evidence.len() + 1,
                        tool: record.tool.clone(),
                        payload: record.observation.clone(),
                        relevance,
                        weight: 0.0,
                    });
                }
                let reward = score_action(&record);
                episode.steps.push(EpisodeStep {
                    reasoning,
                    action: Some(record),
                    reward,
                });
            }
        }
    }
    episode.budget_exhausted = true;
    let last_observation = episode
        .steps
        .iter()
        .rev()
        .find_map(|s| s.action.as_ref().map(|a| a.observation.clone()))
        .or_else(|| episode.steps.last().map(|s| s.reasoning.thought.clone()))
        .unwrap_or_default();
    episode.terminal_summary = format!("budget_exhausted: {last_observation}");
    Ok(episode)
}
