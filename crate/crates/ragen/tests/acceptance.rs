//! Acceptance suite: ten criteria, one printed pass/fail line each. Run with
//! `cargo test --test acceptance -- --nocapture` to see every line.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use sha2::{Digest, Sha256};

use ragen::backends::analyzer::{QueueAnalyzer, StaticAnalyzer};
use ragen::backends::sandbox::{toolchain_available, ProcessSandbox, SandboxRunner};
use ragen::clock::SimClock;
use ragen::eval::{compute_metrics, load_manifest, render_report, MetricsReport, ScenarioResult, Split};
use ragen::extractor::{extract_code, fence};
use ragen::model::{AnalyzerFinding, CodeSnippet, Evidence, Language, Severity, TaskSpec};
use ragen::orchestrator::{
    default_rules, run_pipeline, Agents, DelaySampler, OrchestratorConfig, Phase, PipelineError,
    PipelineEvent,
};
use ragen::searcher::fuse_evidence;

const PLAN: &str = "```plan\n0 | 0.9 | - | no | implement the task\n```";
const REACT_DONE: &str = "Thought: no research needed.\nFinal: direct implementation";
const CODE: &str = "```python\nprint(1)\n```";

fn task() -> TaskSpec {
    TaskSpec {
        task_id: "t1".into(),
        description: "print a constant".into(),
        target_language: Language::Python,
        inputs: vec![],
        outputs: vec![],
        cwe_hint: None,
    }
}

fn finding(rule: &str) -> AnalyzerFinding {
    AnalyzerFinding {
        rule_id: rule.into(),
        severity: Severity::Error,
        file: "main.py".into(),
        line: 1,
        message: "tainted".into(),
    }
}

fn run_scripted(
    scripts: Vec<&str>,
    analyzer: Arc<dyn ragen::backends::analyzer::Analyzer>,
) -> Result<ragen::orchestrator::PipelineOutcome, Box<ragen::orchestrator::PipelineFailure>> {
    let agents = Agents {
        analyzer,
        ..Agents::scripted(scripts.into_iter().map(String::from).collect())
    };
    let clock = SimClock::new();
    run_pipeline(&task(), &agents, &OrchestratorConfig::default(), &clock, None, "acceptance")
}

fn criterion_1_branch_coverage() {
    let started = Instant::now();

    // (a) happy path.
    let outcome = run_scripted(
        vec![PLAN, REACT_DONE, CODE],
        Arc::new(StaticAnalyzer::clean()),
    )
    .unwrap();
    assert_eq!(
        outcome.trajectory.phase_sequence(),
        vec![
            "init",
            "planning",
            "subtask_loop",
            "subtask_loop",
            "subtask_loop",
            "subtask_loop",
            "aggregating",
            "final_validation",
            "done"
        ]
    );

    // (b) validation fail, revise, retry, pass.
    let outcome = run_scripted(
        vec![PLAN, REACT_DONE, CODE, PLAN, REACT_DONE, CODE],
        Arc::new(QueueAnalyzer::new(vec![vec![finding("py/sql-injection")]])),
    )
    .unwrap();
    let phases = outcome.trajectory.phase_sequence();
    assert_eq!(phases.last().map(String::as_str), Some("done"));
    assert_eq!(outcome.state.retries_for("t1-s1"), 1);
    assert_eq!(outcome.trajectory.events_of_kind("feedback").len(), 1);

    // (c) retries exhausted.
    let failure = run_scripted(
        vec![
            PLAN, REACT_DONE, CODE, PLAN, REACT_DONE, CODE, PLAN, REACT_DONE, CODE,
        ],
        Arc::new(StaticAnalyzer::with_findings(vec![finding("py/sql-injection")])),
    )
    .unwrap_err();
    assert!(matches!(
        failure.error,
        PipelineError::SubtaskExhausted { attempts: 3, .. }
    ));
    assert_eq!(
        failure.trajectory.phase_sequence().last().map(String::as_str),
        Some("failed")
    );

    // (d) final validation fails once, restart, pass.
    let outcome = run_scripted(
        vec![PLAN, REACT_DONE, CODE, PLAN, REACT_DONE, CODE],
        Arc::new(QueueAnalyzer::new(vec![
            vec![],
            vec![finding("py/path-injection")],
            vec![],
            vec![],
        ])),
    )
    .unwrap();
    assert_eq!(outcome.state.restart_count, 1);
    let phases = outcome.trajectory.phase_sequence();
    assert_eq!(phases.iter().filter(|p| *p == "planning").count(), 2);
    assert_eq!(phases.last().map(String::as_str), Some("done"));

    // (e) restarts exhausted.
    let failure = run_scripted(
        vec![PLAN, REACT_DONE, CODE, PLAN, REACT_DONE, CODE],
        Arc::new(QueueAnalyzer::new(vec![
            vec![],
            vec![finding("py/path-injection")],
            vec![],
            vec![finding("py/path-injection")],
        ])),
    )
    .unwrap_err();
    assert!(matches!(failure.error, PipelineError::RestartsExhausted));
    assert_eq!(
        failure.trajectory.phase_sequence().last().map(String::as_str),
        Some("failed")
    );

    assert!(
        started.elapsed() < Duration::from_secs(5),
        "branch coverage took {:?}",
        started.elapsed()
    );
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ragen")
}

fn write_run_fixtures(dir: &Path) -> (PathBuf, PathBuf) {
    let task_path = dir.join("task.json");
    std::fs::write(
        &task_path,
        serde_json::to_string(&task()).unwrap(),
    )
    .unwrap();
    let scripts_path = dir.join("scripts.json");
    std::fs::write(
        &scripts_path,
        serde_json::to_string(&[PLAN, REACT_DONE, CODE]).unwrap(),
    )
    .unwrap();
    (task_path, scripts_path)
}

fn criterion_2_replay_determinism() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (task_path, scripts_path) = write_run_fixtures(dir.path());
    let store = dir.path().join("store");
    let config_path = dir.path().join("config.toml");
    std::fs::write(
        &config_path,
        format!(
            "backend = \"scripted\"\nmodel = \"test\"\nreal_sandbox = false\n\
             scripts = {:?}\nreplay_dir = {:?}\n",
            scripts_path, store
        ),
    )
    .unwrap();

    // Record the scripted responses into the replay store.
    let status = Command::new(bin())
        .args(["run", "--task"])
        .arg(&task_path)
        .arg("--config")
        .arg(&config_path)
        .args(["--seed", "7", "--out"])
        .arg(dir.path().join("record"))
        .arg("--record-to")
        .arg(&store)
        .status()
        .unwrap();
    assert!(status.success());

    let hash_of = |out: &Path| {
        let status = Command::new(bin())
            .args(["run", "--task"])
            .arg(&task_path)
            .arg("--config")
            .arg(&config_path)
            .args(["--backend", "replay", "--seed", "7", "--out"])
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
        let bytes = std::fs::read(out.join("trace.jsonl")).unwrap();
        hex::encode(Sha256::digest(&bytes))
    };
    let a = hash_of(&dir.path().join("a"));
    let b = hash_of(&dir.path().join("b"));
    assert_eq!(a, b, "replayed trajectories differ");
    assert!(
        started.elapsed() < Duration::from_secs(2),
        "determinism check took {:?}",
        started.elapsed()
    );
}

fn criterion_3_gamma_moments() {
    let started = Instant::now();
    let mut sampler = DelaySampler::new(20_240_601, u64::MAX);
    let n = 1_000_000_u64;
    let mut sum = 0.0_f64;
    let mut sum_sq = 0.0_f64;
    for _ in 0..n {
        let seconds = sampler.sample().delay_ms as f64 / 1000.0;
        sum += seconds;
        sum_sq += seconds * seconds;
    }
    let mean = sum / n as f64;
    let variance = sum_sq / n as f64 - mean * mean;
    assert!((0.99..=1.01).contains(&mean), "sample mean {mean}");
    assert!((0.48..=0.52).contains(&variance), "sample variance {variance}");
    assert!(
        started.elapsed() < Duration::from_secs(10),
        "gamma sampling took {:?}",
        started.elapsed()
    );
}

fn criterion_4_evidence_fusion() {
    let make = |relevances: &[f64]| -> Vec<Evidence> {
        relevances
            .iter()
            .enumerate()
            .map(|(i, &r)| Evidence {
                source_id: i + 1,
                tool: "search".into(),
                payload: format!("p{i}"),
                relevance: r,
                weight: 0.0,
            })
            .collect()
    };

    let mut rng = StdRng::seed_from_u64(4);
    for _ in 0..1000 {
        let len = rng.gen_range(1..=8);
        let relevances: Vec<f64> = (0..len).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let fused = fuse_evidence(make(&relevances)).unwrap();
        let total: f64 = fused.iter().map(|e| e.weight).sum();
        assert!(fused.iter().all(|e| e.weight >= 0.0));
        assert!((total - 1.0).abs() < 1e-9, "weights sum to {total}");

        let shift = rng.gen_range(-5.0..5.0);
        let shifted: Vec<f64> = relevances.iter().map(|r| r + shift).collect();
        let fused_shifted = fuse_evidence(make(&shifted)).unwrap();
        for (a, b) in fused.iter().zip(&fused_shifted) {
            assert!((a.weight - b.weight).abs() < 1e-9, "shift changed weights");
        }
    }

    let fused = fuse_evidence(make(&[0.0, 2.0_f64.ln()])).unwrap();
    assert!((fused[0].weight - 1.0 / 3.0).abs() < 1e-12);
    assert!((fused[1].weight - 2.0 / 3.0).abs() < 1e-12);
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn criterion_5_manifest_fidelity() {
    let entries = load_manifest(&fixture("sven_scenarios.tsv")).unwrap();
    assert_eq!(entries.len(), 22);
    assert_eq!(entries.iter().filter(|e| e.split == Split::Test).count(), 16);
    assert_eq!(entries.iter().filter(|e| e.split == Split::Val).count(), 6);
    let expected = [
        ("089", 3),
        ("125", 3),
        ("078", 3),
        ("476", 2),
        ("416", 2),
        ("022", 3),
        ("787", 3),
        ("190", 3),
    ];
    for (cwe, count) in expected {
        assert_eq!(
            entries.iter().filter(|e| e.cwe == cwe).count(),
            count,
            "cwe {cwe}"
        );
    }
    assert!(entries
        .iter()
        .any(|e| e.prompt == "removing an email subscription from a database"));
}

fn criterion_6_metrics_oracle() {
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
    // The committed hand count documents the same numbers.
    let hand = std::fs::read_to_string(fixture("metrics_20_handcount.txt")).unwrap();
    for needle in ["95.0", "90.0", "18", "= 1 + 2 = 3"] {
        assert!(hand.contains(needle), "hand count missing {needle}");
    }
}

fn criterion_7_report_formatting() {
    let report = MetricsReport {
        sec_rate: 94.8,
        pass_rate: 95.8,
        eff_mean_seconds: 24.0,
        eff_mean_llm_calls: 11.5,
        sec_count: 23.7,
        unres_count: 1.0,
        sec_score_mean: None,
    };
    let row = render_report(&report, "reference");
    assert!(
        row.contains("94.8 / 95.8 / 24.0 / 23.7 / 1.0"),
        "row was {row:?}"
    );
}

fn criterion_8_extractor_round_trip() {
    let mut rng = StdRng::seed_from_u64(8);
    for _ in 0..500 {
        let lines = rng.gen_range(1..10);
        let body: String = (0..lines)
            .map(|_| {
                let len = rng.gen_range(0..40);
                let line: String = (0..len)
                    .map(|_| {
                        let c = rng.gen_range(b' '..=b'~') as char;
                        if c == '`' {
                            'x'
                        } else {
                            c
                        }
                    })
                    .collect();
                line
            })
            .collect::<Vec<_>>()
            .join("\n");
        if body.trim().is_empty() {
            continue;
        }
        let snippets = extract_code(&fence("python", &body), Language::Python);
        assert_eq!(snippets.len(), 1);
        assert_eq!(snippets[0].body, body);
    }

    let multi = "a:\n```python\nfirst\n```\nb:\n```c\nskip\n```\nc:\n```py\nsecond\n```";
    let snippets = extract_code(multi, Language::Python);
    assert_eq!(snippets.len(), 2);
    assert_eq!(snippets[0].body, "first");
    assert_eq!(snippets[1].body, "second");
    assert!(extract_code("prose only, no fences", Language::Python).is_empty());
}

fn criterion_9_sandbox_reality() {
    let started = Instant::now();
    let sandbox = ProcessSandbox::new();
    let snippet = |language: Language, body: &str| CodeSnippet {
        subtask_id: "s".into(),
        attempt: 1,
        language,
        body: body.into(),
        fenced_origin: true,
    };

    if toolchain_available(Language::Python) {
        let outcome = sandbox
            .run(&snippet(Language::Python, "print(1)\n"), 10_000)
            .unwrap();
        assert!(outcome.compiled && outcome.ran);

        let looped = sandbox
            .run(&snippet(Language::Python, "while True: pass\n"), 500)
            .unwrap();
        assert!(!looped.ran);
        assert!(looped.stderr_head.contains("timeout"));
    } else {
        println!("criterion 9: SKIP python checks (python3 not available)");
    }

    if toolchain_available(Language::C) {
        let outcome = sandbox
            .run(&snippet(Language::C, "int main(){return 0;}\n"), 10_000)
            .unwrap();
        assert!(outcome.compiled && outcome.ran);
    } else {
        println!("criterion 9: SKIP c checks (cc not available)");
    }

    assert!(
        started.elapsed() < Duration::from_secs(15),
        "sandbox checks took {:?}",
        started.elapsed()
    );
}

fn criterion_10_state_machine_soundness() {
    let rules = default_rules();

    // "done" is reachable, and only through final_pass out of
    // final_validation.
    for r in &rules {
        if r.to_phase == Phase::Done {
            assert_eq!(r.event, PipelineEvent::FinalPass);
            assert_eq!(r.from_phase, Phase::FinalValidation);
        }
    }
    assert!(rules.iter().any(|r| r.to_phase == Phase::Done));

    // Exhaustive reachability walk from init.
    let mut reachable = vec![Phase::Init];
    let mut frontier = vec![Phase::Init];
    while let Some(phase) = frontier.pop() {
        for r in rules.iter().filter(|r| r.from_phase == phase) {
            if !reachable.contains(&r.to_phase) {
                reachable.push(r.to_phase);
                frontier.push(r.to_phase);
            }
        }
    }
    for phase in Phase::ALL {
        assert!(reachable.contains(&phase), "{phase} unreachable");
    }

    // Every phase except the two terminals has an outgoing rule; terminals
    // have none.
    for phase in Phase::ALL {
        let outgoing = rules.iter().filter(|r| r.from_phase == phase).count();
        if phase == Phase::Done || phase == Phase::Failed {
            assert_eq!(outgoing, 0, "{phase} must be terminal");
        } else {
            assert!(outgoing > 0, "{phase} has no outgoing rule");
        }
    }
}

#[test]
fn acceptance() {
    let criteria: Vec<(&str, fn())> = vec![
        ("1 pipeline branch coverage", criterion_1_branch_coverage),
        ("2 replay determinism", criterion_2_replay_determinism),
        ("3 gamma delay moments", criterion_3_gamma_moments),
        ("4 evidence fusion properties", criterion_4_evidence_fusion),
        ("5 manifest fidelity", criterion_5_manifest_fidelity),
        ("6 metrics oracle", criterion_6_metrics_oracle),
        ("7 report formatting", criterion_7_report_formatting),
        ("8 extractor round trip", criterion_8_extractor_round_trip),
        ("9 sandbox reality check", criterion_9_sandbox_reality),
        ("10 state machine soundness", criterion_10_state_machine_soundness),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        match catch_unwind(AssertUnwindSafe(run)) {
            Ok(()) => println!("criterion {name}: PASS"),
            Err(_) => {
                println!("criterion {name}: FAIL");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
