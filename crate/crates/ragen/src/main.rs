use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use ragen::backends::analyzer::{CommandAnalyzer, StaticAnalyzer};
use ragen::backends::http::HttpChatBackend;
use ragen::backends::replay::{RecordingBackend, ReplayBackend, ReplayStore};
use ragen::backends::sandbox::{ProcessSandbox, StaticSandbox};
use ragen::backends::search::{LiveSearch, OfflineSearch, SearchProvider, SearchTool};
use ragen::backends::{ChatBackend, ScriptedBackend};
use ragen::clock::{Clock, RealClock, SimClock};
use ragen::codegen::CodegenConfig;
use ragen::config::{BackendKind, ConfigError, DelayMode, ResolvedConfig, RunConfig};
use ragen::eval::{compute_metrics, evaluate, load_manifest, mean_reports, render_report, Split};
use ragen::model::{new_run_id, TaskSpec};
use ragen::orchestrator::{run_pipeline, Agents, OrchestratorConfig};
use ragen::planner::PlannerConfig;
use ragen::searcher::{SearcherConfig, ToolDescriptor, ToolRegistry};
use ragen::templates::TemplateSet;
use ragen::trace::{read_records, EventLog};

#[derive(Parser)]
#[command(name = "ragen", about = "Multi-agent code generation pipeline with replayable traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline on one task
    Run {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the backend kind from the config file
        #[arg(long)]
        backend: Option<String>,
        /// Overrides the searcher step budget
        #[arg(long)]
        max_steps: Option<usize>,
        /// Overrides the per-subtask retry budget
        #[arg(long)]
        max_retries: Option<u32>,
        /// Additionally record all chat responses into this replay store
        #[arg(long)]
        record_to: Option<PathBuf>,
    },
    /// Run the benchmark manifest and render the metrics report
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "all")]
        split: String,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a recorded trajectory human-readably
    Replay {
        #[arg(long)]
        trace: PathBuf,
        /// Show only the event with this sequence number
        #[arg(long)]
        step: Option<u64>,
        /// Show only events attributed to this agent
        #[arg(long)]
        agent: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            task,
            config,
            seed,
            out,
            backend,
            max_steps,
            max_retries,
            record_to,
        } => cmd_run(&task, &config, seed, &out, backend, max_steps, max_retries, record_to),
        Command::Eval {
            manifest,
            config,
            split,
            repeats,
            out,
            seed,
        } => cmd_eval(&manifest, &config, &split, repeats, &out, seed),
        Command::Replay { trace, step, agent } => cmd_replay(&trace, step, agent.as_deref()),
    };
    match code {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    fn run(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::config(e.to_string())
    }
}

fn build_chat_backend(resolved: &ResolvedConfig) -> Result<Arc<dyn ChatBackend>, CliError> {
    let cfg = &resolved.config;
    Ok(match cfg.backend {
        BackendKind::Scripted => {
            let path = cfg.scripts.as_ref().expect("validated");
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::config(format!("scripts file: {e}")))?;
            let scripts: Vec<String> = serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("scripts file: {e}")))?;
            Arc::new(ScriptedBackend::new(scripts))
        }
        BackendKind::Replay => {
            let dir = cfg.replay_dir.as_ref().expect("validated");
            let store = ReplayStore::open(dir)
                .map_err(|e| CliError::config(format!("replay store: {e}")))?;
            Arc::new(ReplayBackend::new(store))
        }
        BackendKind::Live | BackendKind::Record => {
            let base_url = cfg
                .base_url
                .as_ref()
                .ok_or_else(|| CliError::config("live backend needs base_url"))?;
            let live: Arc<dyn ChatBackend> =
                Arc::new(HttpChatBackend::new(base_url, cfg.api_key_env.clone(), 4));
            if cfg.backend == BackendKind::Record {
                let dir = cfg.replay_dir.as_ref().expect("validated");
                let store = ReplayStore::open(dir)
                    .map_err(|e| CliError::config(format!("replay store: {e}")))?;
                Arc::new(RecordingBackend::new(live, store))
            } else {
                live
            }
        }
    })
}

fn build_tools(resolved: &ResolvedConfig) -> Result<ToolRegistry, CliError> {
    let mut registry = ToolRegistry::new();
    for entry in &resolved.config.tools {
        let provider: Arc<dyn SearchProvider> = match entry.kind.as_str() {
            "offline_search" => {
                let corpus = entry
                    .corpus
                    .as_ref()
                    .ok_or_else(|| CliError::config(format!("tool {} needs corpus", entry.name)))?;
                Arc::new(
                    OfflineSearch::load(corpus)
                        .map_err(|e| CliError::config(format!("tool {}: {e}", entry.name)))?,
                )
            }
            "live_search" => {
                let endpoint = entry.endpoint.as_ref().ok_or_else(|| {
                    CliError::config(format!("tool {} needs endpoint", entry.name))
                })?;
                Arc::new(LiveSearch::new(endpoint.clone()))
            }
            other => {
                return Err(CliError::config(format!(
                    "tool {}: unknown kind {other:?}",
                    entry.name
                )))
            }
        };
        registry
            .register(
                ToolDescriptor {
                    name: entry.name.clone(),
                    description: format!("{} ({})", entry.name, entry.kind),
                    timeout_ms: entry.timeout_ms,
                    enabled: entry.enabled,
                },
                Arc::new(SearchTool::new(provider, entry.k)),
            )
            .map_err(|e| CliError::config(e.to_string()))?;
    }
    Ok(registry)
}

fn build_agents(resolved: &ResolvedConfig, record_to: Option<&Path>) -> Result<Agents, CliError> {
    let cfg = &resolved.config;
    let mut chat = build_chat_backend(resolved)?;
    if let Some(dir) = record_to {
        let store =
            ReplayStore::open(dir).map_err(|e| CliError::config(format!("record store: {e}")))?;
        chat = Arc::new(RecordingBackend::new(chat, store));
    }
    let sandbox: Arc<dyn ragen::backends::sandbox::SandboxRunner> = if cfg.real_sandbox {
        Arc::new(ProcessSandbox::new())
    } else {
        Arc::new(StaticSandbox::passing())
    };
    let analyzer: Arc<dyn ragen::backends::analyzer::Analyzer> = match &cfg.analyzer_cmd {
        Some(template) => Arc::new(CommandAnalyzer::new(template.clone())),
        None => Arc::new(StaticAnalyzer::clean()),
    };
    let templates = match &cfg.template_dir {
        Some(dir) => TemplateSet::load_dir(dir)
            .map_err(|e| CliError::config(format!("template dir: {e}")))?,
        None => TemplateSet::builtin(),
    };
    let mut agents = Agents::new(chat, sandbox, analyzer);
    agents.tools = build_tools(resolved)?;
    agents.templates = templates;
    agents.planner_cfg = PlannerConfig {
        model: cfg.model.clone(),
        relevance_threshold: cfg.relevance_threshold,
        feedback_cap: cfg.feedback_cap,
        ..PlannerConfig::default()
    };
    agents.searcher_cfg = SearcherConfig {
        model: cfg.model.clone(),
        step_budget: cfg.step_budget,
        observation_cap: cfg.observation_cap,
    };
    agents.codegen_cfg = CodegenConfig {
        model: cfg.model.clone(),
        prompt_cap: cfg.prompt_cap,
    };
    Ok(agents)
}

fn orchestrator_config(resolved: &ResolvedConfig) -> OrchestratorConfig {
    let cfg = &resolved.config;
    OrchestratorConfig {
        seed: resolved.seed,
        max_retries: cfg.max_retries,
        max_restarts: cfg.max_restarts,
        delta_max_ms: cfg.delta_max_ms,
        sandbox_timeout_ms: cfg.sandbox_timeout_ms,
        query_pack: cfg.query_pack.clone(),
    }
}

fn make_clock(mode: DelayMode) -> Box<dyn Clock> {
    match mode {
        DelayMode::Simulated => Box::new(SimClock::new()),
        DelayMode::Real => Box::new(RealClock::new()),
    }
}

/// Deterministic backends get a seed-derived run id so replayed traces are
/// byte-identical; live runs get a fresh unique id.
fn run_id_for(resolved: &ResolvedConfig) -> String {
    match resolved.config.backend {
        BackendKind::Replay | BackendKind::Scripted => {
            format!("run-seed-{:016x}", resolved.seed)
        }
        BackendKind::Live | BackendKind::Record => new_run_id(),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    task_path: &Path,
    config_path: &Path,
    seed: Option<u64>,
    out: &Path,
    backend_override: Option<String>,
    max_steps: Option<usize>,
    max_retries: Option<u32>,
    record_to: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(kind) = backend_override {
        config.backend = match kind.as_str() {
            "live" => BackendKind::Live,
            "replay" => BackendKind::Replay,
            "scripted" => BackendKind::Scripted,
            "record" => BackendKind::Record,
            other => return Err(CliError::config(format!("unknown backend kind {other:?}"))),
        };
        config.validate()?;
    }
    if let Some(n) = max_steps {
        config.step_budget = n;
    }
    if let Some(n) = max_retries {
        config.max_retries = n;
    }
    let resolved = config.resolve(seed);

    let task_text = std::fs::read_to_string(task_path)
        .map_err(|e| CliError::config(format!("task file: {e}")))?;
    let task: TaskSpec = serde_json::from_str(&task_text)
        .map_err(|e| CliError::config(format!("task file: {e}")))?;
    let violations = task.validate();
    if !violations.is_empty() {
        return Err(CliError::config(format!("task invalid: {}", violations.join("; "))));
    }

    std::fs::create_dir_all(out).map_err(|e| CliError::config(format!("out dir: {e}")))?;
    resolved.write_snapshot(&out.join("config_snapshot.toml"))?;

    let agents = build_agents(&resolved, record_to.as_deref())?;
    let orchestrator_cfg = orchestrator_config(&resolved);
    let clock = make_clock(resolved.config.delay_mode);
    let run_id = run_id_for(&resolved);
    let trace_path = out.join("trace.jsonl");
    if trace_path.exists() {
        std::fs::remove_file(&trace_path)
            .map_err(|e| CliError::config(format!("out dir: {e}")))?;
    }
    let mut log = EventLog::open(&trace_path, &run_id)
        .map_err(|e| CliError::config(format!("trace log: {e}")))?;

    match run_pipeline(&task, &agents, &orchestrator_cfg, clock.as_ref(), Some(&mut log), &run_id) {
        Ok(outcome) => {
            let code_path =
                out.join(format!("program.{}", outcome.program.language.file_extension()));
            std::fs::write(&code_path, &outcome.program.body)
                .map_err(|e| CliError::run(format!("write program: {e}")))?;
            let metrics = serde_json::json!({
                "run_id": run_id,
                "llm_calls": outcome.metrics.llm_calls,
                "wall_ms": outcome.metrics.wall_ms,
                "delay_samples": outcome.metrics.delay_samples,
                "clamped_delays": outcome.metrics.clamped_delays,
            });
            std::fs::write(
                out.join("metrics.json"),
                serde_json::to_string_pretty(&metrics).expect("metrics json"),
            )
            .map_err(|e| CliError::run(format!("write metrics: {e}")))?;
            println!("done: {}", code_path.display());
            Ok(())
        }
        Err(failure) => Err(CliError::run(failure.to_string())),
    }
}

fn cmd_eval(
    manifest_path: &Path,
    config_path: &Path,
    split: &str,
    repeats: usize,
    out: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    let resolved = config.resolve(seed);
    let entries = load_manifest(manifest_path).map_err(|e| CliError::config(e.to_string()))?;
    let entries: Vec<_> = match split {
        "all" => entries,
        "test" => entries.into_iter().filter(|e| e.split == Split::Test).collect(),
        "val" => entries.into_iter().filter(|e| e.split == Split::Val).collect(),
        other => return Err(CliError::config(format!("unknown split {other:?}"))),
    };
    if entries.is_empty() {
        return Err(CliError::config("no scenarios selected"));
    }
    let orchestrator_cfg = orchestrator_config(&resolved);

    std::fs::create_dir_all(out).map_err(|e| CliError::config(format!("out dir: {e}")))?;
    let mut reports = Vec::with_capacity(repeats.max(1));
    for repeat in 0..repeats.max(1) {
        let results = evaluate(&entries, &orchestrator_cfg, |_| {
            build_agents(&resolved, None).expect("agents already validated")
        });
        let lines: String = results
            .iter()
            .map(|r| serde_json::to_string(r).expect("result json") + "\n")
            .collect();
        std::fs::write(out.join(format!("results_{}.jsonl", repeat + 1)), lines)
            .map_err(|e| CliError::run(format!("write results: {e}")))?;
        reports.push(compute_metrics(&results).map_err(|e| CliError::run(e.to_string()))?);
    }
    let report = mean_reports(&reports).map_err(|e| CliError::run(e.to_string()))?;
    let row = render_report(&report, &resolved.config.model);
    std::fs::write(out.join("report.txt"), format!("{row}\n"))
        .map_err(|e| CliError::run(format!("write report: {e}")))?;
    println!("{row}");
    Ok(())
}

fn cmd_replay(trace_path: &Path, step: Option<u64>, agent: Option<&str>) -> Result<(), CliError> {
    let records = read_records(trace_path).map_err(|e| CliError::config(e.to_string()))?;
    for record in records {
        if step.is_some_and(|s| record.seq != s) {
            continue;
        }
        if agent.is_some_and(|a| record.agent != a) {
            continue;
        }
        let summary = match record.event() {
            Ok(event) => summarize(&event),
            Err(e) => return Err(CliError::config(format!("corrupt payload at seq {}: {e}", record.seq))),
        };
        println!(
            "{:>5}  {:>8}ms  [{}] {}: {}",
            record.seq, record.wall_ms, record.agent, record.kind, summary
        );
    }
    Ok(())
}

fn summarize(event: &ragen::trace::TraceEvent) -> String {
    use ragen::trace::TraceEvent::*;
    match event {
        Reasoning(r) => r.thought.clone(),
        Action(a) => format!("{}[{}] ok={} ({} ms)", a.tool, a.input, a.ok, a.elapsed_ms),
        Snippet(s) => format!("{} attempt {} ({} bytes)", s.subtask_id, s.attempt, s.body.len()),
        Validation(v) => format!("{}: {}", v.subject, v.verdict),
        Feedback(f) => format!("{} attempt {}: {}", f.subtask_id, f.attempt, f.failure_kind),
        Phase(p) => format!("{} -> {} on {}", p.from, p.to, p.event),
        Delay(d) => format!("{} -> {}: {} ms{}", d.from_agent, d.to_agent, d.delay_ms,
            if d.clamped { " (clamped)" } else { "" }),
    }
}
