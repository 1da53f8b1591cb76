//! A multi-agent code generation pipeline with explicit, replayable traces.
//!
//! Four agents cooperate under a guarded state machine: a Planner decomposes
//! the task, a Searcher researches each subtask with a ReAct loop, CodeGen
//! produces candidate snippets, and an Extractor validates them through a
//! sandbox and a static analyzer. Every step lands in an append-only
//! trajectory that can be replayed deterministically.

pub mod backends;
pub mod clock;
pub mod codegen;
pub mod config;
pub mod eval;
pub mod extractor;
pub mod model;
pub mod orchestrator;
pub mod planner;
pub mod searcher;
pub mod templates;
pub mod trace;

pub use model::{
    CodeSnippet, DecompositionPlan, Language, Modality, Subtask, TaskSpec, ValidationReport,
    Verdict,
};
pub use orchestrator::{run_pipeline, Agents, OrchestratorConfig, PipelineOutcome};
