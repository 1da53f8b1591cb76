//! Sandbox runner: compiles and executes snippets in an isolated temporary
//! directory with empty stdin and a wall-clock timeout. Isolation is process
//! plus temp-dir only; see the README for the security limitations.

use std::collections::VecDeque;
use std::io::Read;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::model::{CodeSnippet, Language};

const STDERR_HEAD_CAP: usize = 500;

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("sandbox unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SandboxOutcome {
    pub compiled: bool,
    pub ran: bool,
    pub stderr_head: String,
}

pub trait SandboxRunner: Send + Sync {
    fn run(&self, snippet: &CodeSnippet, timeout_ms: u64) -> Result<SandboxOutcome, SandboxError>;
}

/// Real toolchain-backed sandbox.
pub struct ProcessSandbox {
    python: String,
    cc: String,
    cxx: String,
}

impl ProcessSandbox {
    pub fn new() -> Self {
        ProcessSandbox {
            python: "python3".into(),
            cc: "cc".into(),
            cxx: "c++".into(),
        }
    }

    pub fn with_commands(python: impl Into<String>, cc: impl Into<String>, cxx: impl Into<String>) -> Self {
        ProcessSandbox {
            python: python.into(),
            cc: cc.into(),
            cxx: cxx.into(),
        }
    }
}

impl Default for ProcessSandbox {
    fn default() -> Self {
        ProcessSandbox::new()
    }
}

struct RunResult {
    exit_ok: bool,
    timed_out: bool,
    stderr_head: String,
}

fn spawn_in(dir: &Path, program: &str, args: &[&str]) -> Result<Child, SandboxError> {
    Command::new(program)
        .args(args)
        .current_dir(dir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| SandboxError::Unavailable(format!("{program}: {e}")))
}

fn run_with_timeout(
    dir: &Path,
    program: &str,
    args: &[&str],
    timeout_ms: u64,
) -> Result<RunResult, SandboxError> {
    let mut child = spawn_in(dir, program, args)?;
    // Drain stderr on a thread so a chatty child cannot block on a full pipe.
    let mut stderr = child.stderr.take().expect("stderr piped");
    let reader = std::thread::spawn(move || {
        let mut buf = String::new();
        let _ = stderr.read_to_string(&mut buf);
        buf
    });
    let mut stdout = child.stdout.take().expect("stdout piped");
    let out_reader = std::thread::spawn(move || {
        let mut sink = Vec::new();
        let _ = stdout.read_to_end(&mut sink);
    });

    let deadline = Instant::now() + Duration::from_millis(timeout_ms);
    let timed_out;
    let exit_ok;
    loop {
        match child.try_wait() {
            Ok(Some(status)) => {
                timed_out = false;
                exit_ok = status.success();
                break;
            }
            Ok(None) => {
                if Instant::now() >= deadline {
                    let _ = child.kill();
                    let _ = child.wait();
                    timed_out = true;
                    exit_ok = false;
                    break;
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(SandboxError::Unavailable(e.to_string())),
        }
    }
    let _ = out_reader.join();
    let mut stderr_head = reader.join().unwrap_or_default();
    if timed_out {
        stderr_head = format!("timeout after {timeout_ms} ms");
    }
    stderr_head.truncate(STDERR_HEAD_CAP.min(stderr_head.len()));
    Ok(RunResult {
        exit_ok,
        timed_out,
        stderr_head,
    })
}

impl SandboxRunner for ProcessSandbox {
    fn run(&self, snippet: &CodeSnippet, timeout_ms: u64) -> Result<SandboxOutcome, SandboxError> {
        let dir = tempfile::tempdir()
            .map_err(|e| SandboxError::Unavailable(format!("tempdir: {e}")))?;
        let source_name = format!("main.{}", snippet.language.file_extension());
        let source = dir.path().join(&source_name);
        std::fs::write(&source, &snippet.body)
            .map_err(|e| SandboxError::Unavailable(format!("write source: {e}")))?;

        match snippet.language {
            Language::Python => {
                let check = run_with_timeout(
                    dir.path(),
                    &self.python,
                    &["-m", "py_compile", &source_name],
                    timeout_ms,
                )?;
                if !check.exit_ok {
                    return Ok(SandboxOutcome {
                        compiled: false,
                        ran: false,
                        stderr_head: check.stderr_head,
                    });
                }
                let exec = run_with_timeout(dir.path(), &self.python, &[&source_name], timeout_ms)?;
                Ok(SandboxOutcome {
                    compiled: true,
                    ran: exec.exit_ok && !exec.timed_out,
                    stderr_head: exec.stderr_head,
                })
            }
            Language::C | Language::Cpp => {
                let compiler = if snippet.language == Language::C {
                    &self.cc
                } else {
                    &self.cxx
                };
                let compile = run_with_timeout(
                    dir.path(),
                    compiler,
                    &[&source_name, "-o", "prog"],
                    timeout_ms.max(10_000),
                )?;
                if !compile.exit_ok {
                    return Ok(SandboxOutcome {
                        compiled: false,
                        ran: false,
                        stderr_head: compile.stderr_head,
                    });
                }
                let exec = run_with_timeout(dir.path(), "./prog", &[], timeout_ms)?;
                Ok(SandboxOutcome {
                    compiled: true,
                    ran: exec.exit_ok && !exec.timed_out,
                    stderr_head: exec.stderr_head,
                })
            }
        }
    }
}

/// Always returns the same outcome.
pub struct StaticSandbox {
    outcome: SandboxOutcome,
}

impl StaticSandbox {
    pub fn passing() -> Self {
        StaticSandbox {
            outcome: SandboxOutcome {
                compiled: true,
                ran: true,
                stderr_head: String::new(),
            },
        }
    }

    pub fn with_outcome(outcome: SandboxOutcome) -> Self {
        StaticSandbox { outcome }
    }
}

impl SandboxRunner for StaticSandbox {
    fn run(&self, _snippet: &CodeSnippet, _timeout_ms: u64) -> Result<SandboxOutcome, SandboxError> {
        Ok(self.outcome.clone())
    }
}

/// Pops one outcome per call; falls back to passing when the queue is empty.
pub struct QueueSandbox {
    queue: Mutex<VecDeque<SandboxOutcome>>,
}

impl QueueSandbox {
    pub fn new(sequence: Vec<SandboxOutcome>) -> Self {
        QueueSandbox {
            queue: Mutex::new(sequence.into()),
        }
    }
}

impl SandboxRunner for QueueSandbox {
    fn run(&self, _snippet: &CodeSnippet, _timeout_ms: u64) -> Result<SandboxOutcome, SandboxError> {
        let mut queue = self.queue.lock().expect("sandbox queue");
        Ok(queue.pop_front().unwrap_or(SandboxOutcome {
            compiled: true,
            ran: true,
            stderr_head: String::new(),
        }))
    }
}

/// True when the local toolchain for `language` responds.
pub fn toolchain_available(language: Language) -> bool {
    let (program, arg) = match language {
        Language::Python => ("python3", "--version"),
        Language::C => ("cc", "--version"),
        Language::Cpp => ("c++", "--version"),
    };
    Command::new(program)
        .arg(arg)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}
