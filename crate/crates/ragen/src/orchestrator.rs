//! Pipeline orchestration: a guarded state machine drives the four agents
//! through planning, the subtask loop, aggregation and final validation,
//! sampling Gamma-distributed inter-agent delays and recording every event
//! in the trajectory.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

use crate::backends::analyzer::Analyzer;
use crate::backends::sandbox::SandboxRunner;
use crate::backends::{ChatBackend, CountingBackend, ScriptedBackend};
use crate::clock::Clock;
use crate::codegen::{self, AggregateError, CodegenConfig, CodegenError};
use crate::extractor::{self, ExtractorError, KnowledgeStore};
use crate::model::{
    AgentKind, CodeSnippet, DecompositionPlan, SubtaskStatus, TaskSpec, Verdict,
};
use crate::planner::{self, FailureKind, FeedbackNote, PlannerConfig, PlannerError};
use crate::searcher::{self, fuse_evidence, SearcherConfig, SearcherError, ToolRegistry};
use crate::templates::TemplateSet;
use crate::trace::{
    DelayEvent, EventLog, PhaseEvent, SnippetEvent, TimedEvent, TraceError, TraceEvent, Trajectory,
};

pub const DEFAULT_MAX_RETRIES: u32 = 2;
pub const DEFAULT_MAX_RESTARTS: u32 = 1;
pub const DEFAULT_DELTA_MAX_MS: u64 = 5000;
pub const DEFAULT_SANDBOX_TIMEOUT_MS: u64 = 10_000;

pub const GAMMA_SHAPE: f64 = 2.0;
pub const GAMMA_SCALE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Init,
    Planning,
    SubtaskLoop,
    Aggregating,
    FinalValidation,
    Done,
    Failed,
}

impl Phase {
    pub const ALL: [Phase; 7] = [
        Phase::Init,
        Phase::Planning,
        Phase::SubtaskLoop,
        Phase::Aggregating,
        Phase::FinalValidation,
        Phase::Done,
        Phase::Failed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Planning => "planning",
            Phase::SubtaskLoop => "subtask_loop",
            Phase::Aggregating => "aggregating",
            Phase::FinalValidation => "final_validation",
            Phase::Done => "done",
            Phase::Failed => "failed",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PipelineEvent {
    AgentsReady,
    PlanReady,
    EpisodeDone,
    SnippetReady,
    ValidationPass,
    ValidationFail,
    RetriesExhausted,
    AllSubtasksDone,
    FinalPass,
    FinalFail,
    RestartsExhausted,
}

impl PipelineEvent {
    pub const ALL: [PipelineEvent; 11] = [
        PipelineEvent::AgentsReady,
        PipelineEvent::PlanReady,
        PipelineEvent::EpisodeDone,
        PipelineEvent::SnippetReady,
        PipelineEvent::ValidationPass,
        PipelineEvent::ValidationFail,
        PipelineEvent::RetriesExhausted,
        PipelineEvent::AllSubtasksDone,
        PipelineEvent::FinalPass,
        PipelineEvent::FinalFail,
        PipelineEvent::RestartsExhausted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineEvent::AgentsReady => "agents_ready",
            PipelineEvent::PlanReady => "plan_ready",
            PipelineEvent::EpisodeDone => "episode_done",
            PipelineEvent::SnippetReady => "snippet_ready",
            PipelineEvent::ValidationPass => "validation_pass",
            PipelineEvent::ValidationFail => "validation_fail",
            PipelineEvent::RetriesExhausted => "retries_exhausted",
            PipelineEvent::AllSubtasksDone => "all_subtasks_done",
            PipelineEvent::FinalPass => "final_pass",
            PipelineEvent::FinalFail => "final_fail",
            PipelineEvent::RestartsExhausted => "restarts_exhausted",
        }
    }
}

impl std::fmt::Display for PipelineEvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Clock predicate attached to a transition rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Guard {
    Always,
    /// Holds while `clock_ms` is strictly below the deadline.
    Before(u64),
}

impl Guard {
    pub fn holds(self, clock_ms: u64) -> bool {
        match self {
            Guard::Always => true,
            Guard::Before(deadline) => clock_ms < deadline,
        }
    }
}

/// One row of the transition table. Branching is deterministic: for each
/// (phase, event) there is a single successor with weight 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRule {
    pub from_phase: Phase,
    pub event: PipelineEvent,
    pub guard: Guard,
    pub to_phase: Phase,
    pub weight: f64,
}

fn rule(from_phase: Phase, event: PipelineEvent, to_phase: Phase) -> TransitionRule {
    TransitionRule {
        from_phase,
        event,
        guard: Guard::Always,
        to_phase,
        weight: 1.0,
    }
}

/// The full rule table of the pipeline automaton.
pub fn default_rules() -> Vec<TransitionRule> {
    vec![
        rule(Phase::Init, PipelineEvent::AgentsReady, Phase::Planning),
        rule(Phase::Planning, PipelineEvent::PlanReady, Phase::SubtaskLoop),
        rule(Phase::SubtaskLoop, PipelineEvent::EpisodeDone, Phase::SubtaskLoop),
        rule(Phase::SubtaskLoop, PipelineEvent::SnippetReady, Phase::SubtaskLoop),
        rule(Phase::SubtaskLoop, PipelineEvent::ValidationPass, Phase::SubtaskLoop),
        rule(Phase::SubtaskLoop, PipelineEvent::ValidationFail, Phase::SubtaskLoop),
        rule(Phase::SubtaskLoop, PipelineEvent::RetriesExhausted, Phase::Failed),
        rule(Phase::SubtaskLoop, PipelineEvent::AllSubtasksDone, Phase::Aggregating),
        rule(Phase::Aggregating, PipelineEvent::SnippetReady, Phase::FinalValidation),
        rule(Phase::FinalValidation, PipelineEvent::FinalPass, Phase::Done),
        rule(Phase::FinalValidation, PipelineEvent::FinalFail, Phase::Planning),
        rule(Phase::FinalValidation, PipelineEvent::RestartsExhausted, Phase::Failed),
    ]
}

#[derive(Debug, Error)]
pub enum TransitionError {
    #[error("no transition rule for event {event} in phase {phase}")]
    Illegal { phase: Phase, event: PipelineEvent },
    #[error("guard rejected event {event} in phase {phase} at clock {clock_ms} ms")]
    Guard {
        phase: Phase,
        event: PipelineEvent,
        clock_ms: u64,
    },
}

#[derive(Debug, Clone)]
pub struct PipelineState {
    pub phase: Phase,
    pub current_subtask: Option<String>,
    pub retries: HashMap<String, u32>,
    pub restart_count: u32,
    pub clock_ms: u64,
    pub max_retries: u32,
    pub max_restarts: u32,
}

impl PipelineState {
    pub fn new(max_retries: u32, max_restarts: u32) -> Self {
        PipelineState {
            phase: Phase::Init,
            current_subtask: None,
            retries: HashMap::new(),
            restart_count: 0,
            max_retries,
            max_restarts,
            clock_ms: 0,
        }
    }

    pub fn retries_for(&self, subtask_id: &str) -> u32 {
        self.retries.get(subtask_id).copied().unwrap_or(0)
    }
}

/// Applies one event: looks up the unique matching rule, checks its guard,
/// advances the clock by the event's duration, and updates retry/restart
/// bookkeeping.
pub fn step_state(
    state: &PipelineState,
    event: PipelineEvent,
    rules: &[TransitionRule],
    duration_ms: u64,
) -> Result<PipelineState, TransitionError> {
    let matching = rules
        .iter()
        .find(|r| r.from_phase == state.phase && r.event == event)
        .ok_or(TransitionError::Illegal {
            phase: state.phase,
            event,
        })?;
    if !matching.guard.holds(state.clock_ms) {
        return Err(TransitionError::Guard {
            phase: state.phase,
            event,
            clock_ms: state.clock_ms,
        });
    }
    let mut next = state.clone();
    next.phase = matching.to_phase;
    next.clock_ms += duration_ms;
    match event {
        PipelineEvent::ValidationFail => {
            if let Some(id) = &next.current_subtask {
                let count = next.retries.entry(id.clone()).or_insert(0);
                *count += 1;
                debug_assert!(*count <= next.max_retries);
            }
        }
        PipelineEvent::FinalFail => {
            next.restart_count += 1;
            debug_assert!(next.restart_count <= next.max_restarts);
        }
        _ => {}
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelaySample {
    pub delay_ms: u64,
    pub clamped: bool,
}

/// Seeded Gamma(shape 2, scale 0.5) delay source; draws are in seconds,
/// reported in milliseconds and clamped strictly below the ceiling.
pub struct DelaySampler {
    rng: ChaCha8Rng,
    gamma: Gamma<f64>,
    delta_max_ms: u64,
}

impl DelaySampler {
    pub fn new(seed: u64, delta_max_ms: u64) -> Self {
        DelaySampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            gamma: Gamma::new(GAMMA_SHAPE, GAMMA_SCALE).expect("valid gamma parameters"),
            delta_max_ms,
        }
    }

    pub fn sample(&mut self) -> DelaySample {
        let seconds = self.gamma.sample(&mut self.rng);
        let raw_ms = (seconds * 1000.0).round() as u64;
        if raw_ms >= self.delta_max_ms {
            DelaySample {
                delay_ms: self.delta_max_ms.saturating_sub(1),
                clamped: true,
            }
        } else {
            DelaySample {
                delay_ms: raw_ms,
                clamped: false,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEdge {
    pub from: AgentKind,
    pub to: AgentKind,
    pub delay_ms: u64,
}

/// The four agent nodes plus the delays observed on their message edges.
#[derive(Debug, Clone)]
pub struct CoordinationGraph {
    pub nodes: Vec<(AgentKind, String)>,
    pub edges: Vec<GraphEdge>,
    pub delta_max_ms: u64,
}

impl CoordinationGraph {
    pub fn new(delta_max_ms: u64) -> Self {
        CoordinationGraph {
            nodes: vec![
                (AgentKind::Planner, "idle".into()),
                (AgentKind::Searcher, "idle".into()),
                (AgentKind::Codegen, "idle".into()),
                (AgentKind::Extractor, "idle".into()),
            ],
            edges: Vec::new(),
            delta_max_ms,
        }
    }

    pub fn record_edge(&mut self, from: AgentKind, to: AgentKind, delay_ms: u64) {
        debug_assert!(delay_ms < self.delta_max_ms);
        self.edges.push(GraphEdge { from, to, delay_ms });
    }

    pub fn set_node_state(&mut self, agent: AgentKind, state: impl Into<String>) {
        if let Some(node) = self.nodes.iter_mut().find(|(a, _)| *a == agent) {
            node.1 = state.into();
        }
    }
}

/// Everything the pipeline needs to act: one chat backend shared by the three
/// LLM-driven agents, the searcher's tools, and the validation backends.
pub struct Agents {
    pub llm: Arc<CountingBackend>,
    pub tools: ToolRegistry,
    pub sandbox: Arc<dyn SandboxRunner>,
    pub analyzer: Arc<dyn Analyzer>,
    pub templates: TemplateSet,
    pub planner_cfg: PlannerConfig,
    pub searcher_cfg: SearcherConfig,
    pub codegen_cfg: CodegenConfig,
}

impl Agents {
    pub fn new(llm: Arc<dyn ChatBackend>, sandbox: Arc<dyn SandboxRunner>, analyzer: Arc<dyn Analyzer>) -> Self {
        Agents {
            llm: Arc::new(CountingBackend::new(llm)),
            tools: ToolRegistry::new(),
            sandbox,
            analyzer,
            templates: TemplateSet::builtin(),
            planner_cfg: PlannerConfig::default(),
            searcher_cfg: SearcherConfig::default(),
            codegen_cfg: CodegenConfig::default(),
        }
    }

    /// Test and demo helper: scripted LLM, passing sandbox, clean analyzer.
    pub fn scripted(responses: Vec<String>) -> Self {
        Agents::new(
            Arc::new(ScriptedBackend::new(responses)),
            Arc::new(crate::backends::sandbox::StaticSandbox::passing()),
            Arc::new(crate::backends::analyzer::StaticAnalyzer::clean()),
        )
    }
}

#[derive(Debug, Clone)]
pub struct OrchestratorConfig {
    pub seed: u64,
    pub max_retries: u32,
    pub max_restarts: u32,
    pub delta_max_ms: u64,
    pub sandbox_timeout_ms: u64,
    pub query_pack: String,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        OrchestratorConfig {
            seed: 0,
            max_retries: DEFAULT_MAX_RETRIES,
            max_restarts: DEFAULT_MAX_RESTARTS,
            delta_max_ms: DEFAULT_DELTA_MAX_MS,
            sandbox_timeout_ms: DEFAULT_SANDBOX_TIMEOUT_MS,
            query_pack: "security".into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Searcher(#[from] SearcherError),
    #[error(transparent)]
    Codegen(#[from] CodegenError),
    #[error(transparent)]
    Extractor(#[from] ExtractorError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Transition(#[from] TransitionError),
    #[error("subtask {subtask_id} exhausted after {attempts} attempts")]
    SubtaskExhausted { subtask_id: String, attempts: u32 },
    #[error("final validation failed and restart budget is exhausted")]
    RestartsExhausted,
    #[error("plan produced no runnable subtask order")]
    UnschedulablePlan,
}

/// Pipeline failure carrying everything recorded up to the point of failure.
#[derive(Debug)]
pub struct PipelineFailure {
    pub error: PipelineError,
    pub trajectory: Trajectory,
    pub state: PipelineState,
}

impl std::fmt::Display for PipelineFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "pipeline failed in phase {}: {}", self.state.phase, self.error)
    }
}

impl std::error::Error for PipelineFailure {}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub llm_calls: u64,
    pub wall_ms: u64,
    pub delay_samples: u64,
    pub clamped_delays: u64,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub program: CodeSnippet,
    pub trajectory: Trajectory,
    pub metrics: RunMetrics,
    pub state: PipelineState,
    pub graph: CoordinationGraph,
}

struct Runner<'a> {
    task: &'a TaskSpec,
    agents: &'a Agents,
    cfg: &'a OrchestratorConfig,
    clock: &'a dyn Clock,
    rules: Vec<TransitionRule>,
    state: PipelineState,
    trajectory: Trajectory,
    log: Option<&'a mut EventLog>,
    sampler: DelaySampler,
    graph: CoordinationGraph,
    knowledge: KnowledgeStore,
    delay_samples: u64,
    clamped_delays: u64,
    next_seq: u64,
}

impl<'a> Runner<'a> {
    fn record(&mut self, event: TraceEvent) -> Result<(), PipelineError> {
        let wall_ms = self.clock.now_ms();
        if let Some(log) = self.log.as_deref_mut() {
            log.append_event(wall_ms, &event)?;
        }
        self.trajectory.events.push(TimedEvent {
            seq: self.next_seq,
            wall_ms,
            event,
        });
        self.next_seq += 1;
        Ok(())
    }

    fn transition(&mut self, event: PipelineEvent) -> Result<(), PipelineError> {
        let from = self.state.phase;
        self.state = step_state(&self.state, event, &self.rules, 0)?;
        self.state.clock_ms = self.clock.now_ms();
        self.record(TraceEvent::Phase(PhaseEvent {
            from: from.as_str().to_string(),
            to: self.state.phase.as_str().to_string(),
            event: event.as_str().to_string(),
        }))
    }

    fn delay(&mut self, from: AgentKind, to: AgentKind) -> Result<(), PipelineError> {
        let sample = self.sampler.sample();
        self.delay_samples += 1;
        if sample.clamped {
            self.clamped_delays += 1;
        }
        self.clock.advance(sample.delay_ms);
        self.state.clock_ms = self.clock.now_ms();
        self.graph.record_edge(from, to, sample.delay_ms);
        self.record(TraceEvent::Delay(DelayEvent {
            from_agent: from.to_string(),
            to_agent: to.to_string(),
            delay_ms: sample.delay_ms,
            clamped: sample.clamped,
        }))
    }

    fn record_snippet(&mut self, snippet: &CodeSnippet) -> Result<(), PipelineError> {
        self.record(TraceEvent::Snippet(SnippetEvent {
            subtask_id: snippet.subtask_id.clone(),
            attempt: snippet.attempt,
            language: snippet.language,
            fenced_origin: snippet.fenced_origin,
            body: snippet.body.clone(),
        }))
    }

    fn fail(self, error: PipelineError) -> Box<PipelineFailure> {
        Box::new(PipelineFailure {
            error,
            trajectory: self.trajectory,
            state: self.state,
        })
    }

    /// Episode → generate → extract → validate for one subtask, with the
    /// revise-and-retry loop.
    fn run_subtask(
        &mut self,
        plan: &mut DecompositionPlan,
        subtask_id: &str,
    ) -> Result<CodeSnippet, PipelineError> {
        self.state.current_subtask = Some(subtask_id.to_string());
        let mut feedback: Option<FeedbackNote> = None;
        loop {
            let attempt = self.state.retries_for(subtask_id) + 1;
            let subtask = plan
                .subtask(subtask_id)
                .ok_or_else(|| PlannerError::UnknownSubtask(subtask_id.to_string()))?
                .clone();

            self.delay(AgentKind::Planner, AgentKind::Searcher)?;
            let mut episode = searcher::run_episode(
                &subtask,
                self.agents.llm.as_ref(),
                &self.agents.tools,
                &self.agents.templates,
                &self.agents.searcher_cfg,
                self.clock,
            )?;
            for step in &episode.steps {
                self.record(TraceEvent::Reasoning(step.reasoning.clone()))?;
                if let Some(action) = &step.action {
                    self.record(TraceEvent::Action(action.clone()))?;
                }
            }
            if !episode.evidence.is_empty() {
                episode.evidence = fuse_evidence(episode.evidence)?;
            }
            self.transition(PipelineEvent::EpisodeDone)?;

            self.delay(AgentKind::Searcher, AgentKind::Codegen)?;
            let raw = codegen::generate(
                self.task,
                &subtask.description,
                &episode,
                feedback.as_ref(),
                self.agents.llm.as_ref(),
                &self.agents.templates,
                &self.agents.codegen_cfg,
            )?;

            let extracted = extractor::extract_code(&raw, self.task.target_language);
            let note = match extracted.into_iter().next() {
                Some(mut snippet) => {
                    snippet.subtask_id = subtask_id.to_string();
                    snippet.attempt = attempt;
                    self.record_snippet(&snippet)?;
                    self.transition(PipelineEvent::SnippetReady)?;

                    self.delay(AgentKind::Codegen, AgentKind::Extractor)?;
                    let report = extractor::validate_snippet(
                        &snippet,
                        self.agents.sandbox.as_ref(),
                        self.agents.analyzer.as_ref(),
                        self.cfg.sandbox_timeout_ms,
                        &self.cfg.query_pack,
                    )?;
                    self.record(TraceEvent::Validation(report.clone()))?;
                    for item in
                        extractor::extract_knowledge(&report, &snippet, self.clock.now_ms())
                    {
                        self.knowledge.add(item);
                    }
                    if report.verdict == Verdict::Pass {
                        self.transition(PipelineEvent::ValidationPass)?;
                        if let Some(s) =
                            plan.subtasks.iter_mut().find(|s| s.subtask_id == subtask_id)
                        {
                            s.status = SubtaskStatus::Validated;
                        }
                        return Ok(snippet);
                    }
                    let kind = match report.verdict {
                        Verdict::SecurityFail => FailureKind::SecurityFail,
                        _ => FailureKind::FunctionalFail,
                    };
                    let details = if report.findings.is_empty() {
                        report.stderr_head.clone()
                    } else {
                        report
                            .findings
                            .iter()
                            .map(|f| format!("{}: {}", f.rule_id, f.message))
                            .collect::<Vec<_>>()
                            .join("; ")
                    };
                    FeedbackNote::new(
                        subtask_id,
                        attempt,
                        kind,
                        details,
                        self.agents.planner_cfg.feedback_cap,
                    )
                }
                None => FeedbackNote::new(
                    subtask_id,
                    attempt,
                    FailureKind::ExtractionFail,
                    "model output contained no usable code block",
                    self.agents.planner_cfg.feedback_cap,
                ),
            };
            self.record(TraceEvent::Feedback(note.clone()))?;

            if self.state.retries_for(subtask_id) >= self.state.max_retries {
                self.transition(PipelineEvent::RetriesExhausted)?;
                if let Some(s) = plan.subtasks.iter_mut().find(|s| s.subtask_id == subtask_id) {
                    s.status = SubtaskStatus::Failed;
                }
                return Err(PipelineError::SubtaskExhausted {
                    subtask_id: subtask_id.to_string(),
                    attempts: attempt,
                });
            }
            self.transition(PipelineEvent::ValidationFail)?;

            self.delay(AgentKind::Extractor, AgentKind::Planner)?;
            *plan = planner::revise(
                plan,
                self.task,
                &note,
                self.agents.llm.as_ref(),
                &self.agents.templates,
                &self.agents.planner_cfg,
            )?;
            feedback = Some(note);
        }
    }

    fn run(mut self) -> Result<PipelineOutcome, Box<PipelineFailure>> {
        macro_rules! attempt {
            ($expr:expr) => {
                match $expr {
                    Ok(value) => value,
                    Err(e) => return Err(self.fail(e.into())),
                }
            };
        }

        attempt!(self.transition(PipelineEvent::AgentsReady));
        loop {
            let mut plan = attempt!(planner::decompose(
                self.task,
                self.knowledge.items(),
                self.agents.llm.as_ref(),
                &self.agents.templates,
                &self.agents.planner_cfg,
            ));
            attempt!(self.transition(PipelineEvent::PlanReady));

            // Dependency-order scheduling. Subtasks may be added by mid-run
            // revisions, so the frontier is recomputed each round.
            let mut snippets: Vec<CodeSnippet> = Vec::new();
            let mut subtask_error: Option<PipelineError> = None;
            loop {
                let next_id = {
                    let validated: std::collections::HashSet<&str> = plan
                        .subtasks
                        .iter()
                        .filter(|s| s.status == SubtaskStatus::Validated)
                        .map(|s| s.subtask_id.as_str())
                        .collect();
                    let order = match plan.topological_order() {
                        Some(order) => order,
                        None => {
                            subtask_error = Some(PipelineError::UnschedulablePlan);
                            break;
                        }
                    };
                    order.into_iter().find(|id| {
                        let s = plan.subtask(id).expect("id from plan order");
                        s.status != SubtaskStatus::Validated
                            && s.depends_on.iter().all(|d| validated.contains(d.as_str()))
                    })
                };
                let Some(id) = next_id else { break };
                match self.run_subtask(&mut plan, &id) {
                    Ok(snippet) => snippets.push(snippet),
                    Err(e) => {
                        subtask_error = Some(e);
                        break;
                    }
                }
            }
            if let Some(e) = subtask_error {
                return Err(self.fail(e));
            }
            attempt!(self.transition(PipelineEvent::AllSubtasksDone));

            self.delay(AgentKind::Extractor, AgentKind::Codegen)
                .map_err(|e| {
                    Box::new(PipelineFailure {
                        error: e,
                        trajectory: self.trajectory.clone(),
                        state: self.state.clone(),
                    })
                })?;
            let body = attempt!(codegen::aggregate(
                &plan,
                &snippets,
                self.task.target_language
            ));
            let program = CodeSnippet {
                subtask_id: "final".to_string(),
                attempt: self.state.restart_count + 1,
                language: self.task.target_language,
                body,
                fenced_origin: false,
            };
            attempt!(self.record_snippet(&program));
            attempt!(self.transition(PipelineEvent::SnippetReady));

            self.delay(AgentKind::Codegen, AgentKind::Extractor)
                .map_err(|e| {
                    Box::new(PipelineFailure {
                        error: e,
                        trajectory: self.trajectory.clone(),
                        state: self.state.clone(),
                    })
                })?;
            let report = attempt!(extractor::validate_snippet(
                &program,
                self.agents.sandbox.as_ref(),
                self.agents.analyzer.as_ref(),
                self.cfg.sandbox_timeout_ms,
                &self.cfg.query_pack,
            ));
            attempt!(self.record(TraceEvent::Validation(report.clone())));
            for item in extractor::extract_knowledge(&report, &program, self.clock.now_ms()) {
                self.knowledge.add(item);
            }

            if report.verdict == Verdict::Pass {
                attempt!(self.transition(PipelineEvent::FinalPass));
                let metrics = RunMetrics {
                    llm_calls: self.agents.llm.calls(),
                    wall_ms: self.clock.now_ms(),
                    delay_samples: self.delay_samples,
                    clamped_delays: self.clamped_delays,
                };
                return Ok(PipelineOutcome {
                    program,
                    trajectory: self.trajectory,
                    metrics,
                    state: self.state,
                    graph: self.graph,
                });
            }

            let note = FeedbackNote::new(
                "final",
                self.state.restart_count + 1,
                match report.verdict {
                    Verdict::SecurityFail => FailureKind::SecurityFail,
                    _ => FailureKind::FunctionalFail,
                },
                format!(
                    "aggregated program failed final validation: {}",
                    report
                        .findings
                        .iter()
                        .map(|f| f.rule_id.as_str())
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
                self.agents.planner_cfg.feedback_cap,
            );
            attempt!(self.record(TraceEvent::Feedback(note)));

            if self.state.restart_count >= self.state.max_restarts {
                attempt!(self.transition(PipelineEvent::RestartsExhausted));
                return Err(self.fail(PipelineError::RestartsExhausted));
            }
            attempt!(self.transition(PipelineEvent::FinalFail));
            self.delay(AgentKind::Extractor, AgentKind::Planner)
                .map_err(|e| {
                    Box::new(PipelineFailure {
                        error: e,
                        trajectory: self.trajectory.clone(),
                        state: self.state.clone(),
                    })
                })?;
        }
    }
}

/// Runs the full pipeline for one task.
pub fn run_pipeline(
    task: &TaskSpec,
    agents: &Agents,
    cfg: &OrchestratorConfig,
    clock: &dyn Clock,
    log: Option<&mut EventLog>,
    run_id: &str,
) -> Result<PipelineOutcome, Box<PipelineFailure>> {
    let runner = Runner {
        task,
        agents,
        cfg,
        clock,
        rules: default_rules(),
        state: PipelineState::new(cfg.max_retries, cfg.max_restarts),
        trajectory: Trajectory::new(run_id),
        log,
        sampler: DelaySampler::new(cfg.seed, cfg.delta_max_ms),
        graph: CoordinationGraph::new(cfg.delta_max_ms),
        knowledge: KnowledgeStore::new(),
        delay_samples: 0,
        clamped_delays: 0,
        next_seq: 0,
    };
    runner.run()
}
