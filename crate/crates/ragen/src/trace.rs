//! Trajectory recording: an append-only, line-delimited event log plus the
//! in-memory view the orchestrator assembles during a run.
//!
//! Each record line carries `run_id, seq, wall_ms, kind, agent, payload` so a
//! trace file is self-contained for replay and inspection.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{ActionRecord, Language, ReasoningStep, ValidationReport};
use crate::planner::FeedbackNote;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace write failed: {0}")]
    StoreWrite(#[from] std::io::Error),
    #[error("corrupt trace at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
}

/// A generated snippet entering the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetEvent {
    pub subtask_id: String,
    pub attempt: u32,
    pub language: Language,
    pub fenced_origin: bool,
    pub body: String,
}

/// A pipeline phase transition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseEvent {
    pub from: String,
    pub to: String,
    pub event: String,
}

/// A sampled inter-agent communication delay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayEvent {
    pub from_agent: String,
    pub to_agent: String,
    pub delay_ms: u64,
    pub clamped: bool,
}

/// Everything that can appear in a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    Reasoning(ReasoningStep),
    Action(ActionRecord),
    Snippet(SnippetEvent),
    Validation(ValidationReport),
    Feedback(FeedbackNote),
    Phase(PhaseEvent),
    Delay(DelayEvent),
}

impl TraceEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            TraceEvent::Reasoning(_) => "reasoning",
            TraceEvent::Action(_) => "action",
            TraceEvent::Snippet(_) => "snippet",
            TraceEvent::Validation(_) => "validation",
            TraceEvent::Feedback(_) => "feedback",
            TraceEvent::Phase(_) => "phase",
            TraceEvent::Delay(_) => "delay",
        }
    }

    /// The single agent this event is attributed to.
    pub fn agent(&self) -> &'static str {
        match self {
            TraceEvent::Reasoning(r) => match r.agent {
                crate::model::AgentKind::Planner => "planner",
                crate::model::AgentKind::Searcher => "searcher",
                crate::model::AgentKind::Codegen => "codegen",
                crate::model::AgentKind::Extractor => "extractor",
            },
            TraceEvent::Action(_) => "searcher",
            TraceEvent::Snippet(_) => "codegen",
            TraceEvent::Validation(_) => "extractor",
            TraceEvent::Feedback(_) => "planner",
            TraceEvent::Phase(_) | TraceEvent::Delay(_) => "orchestrator",
        }
    }

    fn payload(&self) -> Value {
        match self {
            TraceEvent::Reasoning(v) => serde_json::to_value(v).expect("serialize"),
            TraceEvent::Action(v) => serde_json::to_value(v).expect("serialize"),
            TraceEvent::Snippet(v) => serde_json::to_value(v).expect("serialize"),
            TraceEvent::Validation(v) => serde_json::to_value(v).expect("serialize"),
            TraceEvent::Feedback(v) => serde_json::to_value(v).expect("serialize"),
            TraceEvent::Phase(v) => serde_json::to_value(v).expect("serialize"),
            TraceEvent::Delay(v) => serde_json::to_value(v).expect("serialize"),
        }
    }

    fn from_kind_payload(kind: &str, payload: Value) -> Result<Self, serde_json::Error> {
        Ok(match kind {
            "reasoning" => TraceEvent::Reasoning(serde_json::from_value(payload)?),
            "action" => TraceEvent::Action(serde_json::from_value(payload)?),
            "snippet" => TraceEvent::Snippet(serde_json::from_value(payload)?),
            "validation" => TraceEvent::Validation(serde_json::from_value(payload)?),
            "feedback" => TraceEvent::Feedback(serde_json::from_value(payload)?),
            "phase" => TraceEvent::Phase(serde_json::from_value(payload)?),
            "delay" => TraceEvent::Delay(serde_json::from_value(payload)?),
            other => {
                return Err(serde::de::Error::custom(format!("unknown event kind {other}")));
            }
        })
    }
}

/// One serialized log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub run_id: String,
    pub seq: u64,
    pub wall_ms: u64,
    pub kind: String,
    pub agent: String,
    pub payload: Value,
}

impl TraceRecord {
    pub fn event(&self) -> Result<TraceEvent, serde_json::Error> {
        TraceEvent::from_kind_payload(&self.kind, self.payload.clone())
    }
}

/// The ordered in-memory record of a run.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub run_id: String,
    pub events: Vec<TimedEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimedEvent {
    pub seq: u64,
    pub wall_ms: u64,
    pub event: TraceEvent,
}

impl Trajectory {
    pub fn new(run_id: impl Into<String>) -> Self {
        Trajectory {
            run_id: run_id.into(),
            events: Vec::new(),
        }
    }

    pub fn events_of_kind(&self, kind: &str) -> Vec<&TraceEvent> {
        self.events
            .iter()
            .filter(|e| e.event.kind() == kind)
            .map(|e| &e.event)
            .collect()
    }

    /// Sequence of visited phases, starting from the first transition's `from`.
    pub fn phase_sequence(&self) -> Vec<String> {
        let mut out = Vec::new();
        for e in &self.events {
            if let TraceEvent::Phase(p) = &e.event {
                if out.is_empty() {
                    out.push(p.from.clone());
                }
                out.push(p.to.clone());
            }
        }
        out
    }
}

/// Append-only writer; one writer per trace file.
pub struct EventLog {
    run_id: String,
    writer: BufWriter<File>,
    next_seq: u64,
}

impl EventLog {
    /// Opens (or creates) a log, resuming the sequence counter after the last
    /// record already present.
    pub fn open(path: &Path, run_id: &str) -> Result<Self, TraceError> {
        let next_seq = if path.exists() {
            read_records(path)?.last().map(|r| r.seq + 1).unwrap_or(0)
        } else {
            0
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(EventLog {
            run_id: run_id.to_string(),
            writer: BufWriter::new(file),
            next_seq,
        })
    }

    pub fn append_event(&mut self, wall_ms: u64, event: &TraceEvent) -> Result<u64, TraceError> {
        let record = TraceRecord {
            run_id: self.run_id.clone(),
            seq: self.next_seq,
            wall_ms,
            kind: event.kind().to_string(),
            agent: event.agent().to_string(),
            payload: event.payload(),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| TraceError::Corrupt { line: 0, reason: e.to_string() })?;
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        self.next_seq += 1;
        Ok(record.seq)
    }
}

/// Reads a whole trace file; reports the first corrupt line.
pub fn read_records(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(&line).map_err(|e| TraceError::Corrupt {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Loads a trace file back into a trajectory.
pub fn load_trajectory(path: &Path) -> Result<Trajectory, TraceError> {
    let records = read_records(path)?;
    let run_id = records.first().map(|r| r.run_id.clone()).unwrap_or_default();
    let mut events = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let event = r.event().map_err(|e| TraceError::Corrupt {
            line: i + 1,
            reason: e.to_string(),
        })?;
        events.push(TimedEvent {
            seq: r.seq,
            wall_ms: r.wall_ms,
            event,
        });
    }
    Ok(Trajectory { run_id, events })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AgentKind;

    fn sample_event(i: usize) -> TraceEvent {
        TraceEvent::Reasoning(ReasoningStep {
            step_index: i,
            agent: AgentKind::Searcher,
            thought: format!("thought {i}"),
            wall_ms: i as u64,
        })
    }

    #[test]
    fn append_numbers_sequentially() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let mut log = EventLog::open(&path, "run-1").unwrap();
        for i in 0..3 {
            let seq = log.append_event(i as u64, &sample_event(i)).unwrap();
            assert_eq!(seq, i as u64);
        }
        let records = read_records(&path).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn reopen_resumes_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        {
            let mut log = EventLog::open(&path, "run-1").unwrap();
            log.append_event(0, &sample_event(0)).unwrap();
        }
        let mut log = EventLog::open(&path, "run-1").unwrap();
        let seq = log.append_event(1, &sample_event(1)).unwrap();
        assert_eq!(seq, 1);
    }

    #[test]
    fn round_trip_preserves_events() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let events = vec![
            sample_event(0),
            TraceEvent::Phase(PhaseEvent {
                from: "init".into(),
                to: "planning".into(),
                event: "agents_ready".into(),
            }),
            TraceEvent::Delay(DelayEvent {
                from_agent: "planner".into(),
                to_agent: "searcher".into(),
                delay_ms: 812,
                clamped: false,
            }),
        ];
        {
            let mut log = EventLog::open(&path, "run-1").unwrap();
            for (i, e) in events.iter().enumerate() {
                log.append_event(i as u64, e).unwrap();
            }
        }
        let trajectory = load_trajectory(&path).unwrap();
        assert_eq!(trajectory.run_id, "run-1");
        let loaded: Vec<TraceEvent> = trajectory.events.into_iter().map(|e| e.event).collect();
        assert_eq!(loaded, events);
    }

    #[test]
    fn corrupt_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        {
            let mut log = EventLog::open(&path, "run-1").unwrap();
            log.append_event(0, &sample_event(0)).unwrap();
        }
        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap()
            .write_all(b"{truncated\n")
            .unwrap();
        match read_records(&path) {
            Err(TraceError::Corrupt { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected corrupt error, got {other:?}"),
        }
    }
}
