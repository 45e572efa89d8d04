//! Trajectory persistence: a versioned JSONL stream plus a content-addressed
//! screenshot store.
//!
//! One header line (task, config snapshot), one line per executed step, one
//! footer line (final state, timing, attribution, plan revisions).
//! Screenshots are stored as separate PNG files named by content hash and
//! referenced from step lines.

use crate::agents::{Plan, ProgressVerdict, Task};
use crate::grammar::{parse_action, serialize_action};
use crate::memory::{MemoryEntry, StateFingerprint};
use crate::orchestrator::{
    FailureComponent, RunConfigSnapshot, TaskState, TaskStatus, TrajectoryRecord,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Version of the trajectory line schema.
pub const SCHEMA_VERSION: u32 = 1;

/// Default file name for a persisted trajectory.
pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TrajectoryError {
    #[error("io error: {0}")]
    Io(String),
    #[error("malformed trajectory: {0}")]
    Malformed(String),
    #[error("trajectory is truncated (no footer line)")]
    Truncated,
    #[error("unsupported trajectory schema version {0}")]
    UnsupportedSchema(u32),
}

impl From<std::io::Error> for TrajectoryError {
    fn from(e: std::io::Error) -> Self {
        TrajectoryError::Io(e.to_string())
    }
}

/// Content-hash reference for a PNG capture.
pub fn content_ref(png_bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(png_bytes);
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Storage for screenshots referenced from trajectory steps.
pub trait ScreenshotStore: Send {
    /// Saves the capture and returns its content-hash reference.
    fn store(&mut self, png_bytes: &[u8]) -> String;
    /// Loads a capture back by reference.
    fn load(&self, screenshot_ref: &str) -> Option<Vec<u8>>;
}

/// In-memory store for tests and ephemeral runs.
#[derive(Debug, Default)]
pub struct MemoryScreenshotStore {
    images: BTreeMap<String, Vec<u8>>,
}

impl MemoryScreenshotStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl ScreenshotStore for MemoryScreenshotStore {
    fn store(&mut self, png_bytes: &[u8]) -> String {
        let r = content_ref(png_bytes);
        self.images.entry(r.clone()).or_insert_with(|| png_bytes.to_vec());
        r
    }

    fn load(&self, screenshot_ref: &str) -> Option<Vec<u8>> {
        self.images.get(screenshot_ref).cloned()
    }
}

/// Stores screenshots as `<dir>/<hash>.png`. Write failures are collected
/// rather than raised; the content reference is valid either way.
#[derive(Debug)]
pub struct DirScreenshotStore {
    dir: PathBuf,
    errors: Vec<String>,
}

impl DirScreenshotStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        DirScreenshotStore { dir: dir.into(), errors: Vec::new() }
    }

    pub fn path_for(&self, screenshot_ref: &str) -> PathBuf {
        self.dir.join(format!("{screenshot_ref}.png"))
    }

    /// I/O failures accumulated while storing.
    pub fn errors(&self) -> &[String] {
        &self.errors
    }
}

impl ScreenshotStore for DirScreenshotStore {
    fn store(&mut self, png_bytes: &[u8]) -> String {
        let r = content_ref(png_bytes);
        let path = self.path_for(&r);
        if !path.exists() {
            let write = std::fs::create_dir_all(&self.dir)
                .and_then(|_| std::fs::write(&path, png_bytes));
            if let Err(e) = write {
                self.errors.push(format!("{}: {e}", path.display()));
            }
        }
        r
    }

    fn load(&self, screenshot_ref: &str) -> Option<Vec<u8>> {
        std::fs::read(self.path_for(screenshot_ref)).ok()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TrajectoryLine {
    Header {
        schema_version: u32,
        task: Task,
        config: RunConfigSnapshot,
    },
    Step {
        step_index: u64,
        action: String,
        directive: String,
        delta_summary: String,
        verdict: ProgressVerdict,
        state_before: TaskState,
        state_after: TaskState,
        screenshot_before: String,
        screenshot_after: String,
        fingerprint_after: u64,
    },
    Footer {
        final_state: TaskState,
        wall_seconds: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        failure_attribution: Option<FailureComponent>,
        plans: Vec<Plan>,
        step_count: u64,
    },
}

/// Serializes a record as JSONL.
pub fn write_jsonl(record: &TrajectoryRecord, mut w: impl Write) -> Result<(), TrajectoryError> {
    let mut emit = |line: &TrajectoryLine| -> Result<(), TrajectoryError> {
        let json = serde_json::to_string(line)
            .map_err(|e| TrajectoryError::Malformed(e.to_string()))?;
        writeln!(w, "{json}")?;
        Ok(())
    };

    emit(&TrajectoryLine::Header {
        schema_version: record.schema_version,
        task: record.task.clone(),
        config: record.config,
    })?;
    for entry in &record.entries {
        emit(&TrajectoryLine::Step {
            step_index: entry.step_index,
            action: serialize_action(&entry.action),
            directive: entry.directive.clone(),
            delta_summary: entry.delta_summary.clone(),
            verdict: entry.verdict.clone(),
            state_before: entry.state_before.clone(),
            state_after: entry.state_after.clone(),
            screenshot_before: entry.screenshot_ref_before.clone(),
            screenshot_after: entry.screenshot_ref_after.clone(),
            fingerprint_after: entry.fingerprint_after.0,
        })?;
    }
    emit(&TrajectoryLine::Footer {
        final_state: record.final_state.clone(),
        wall_seconds: record.wall_seconds,
        failure_attribution: record.failure_attribution,
        plans: record.plans.clone(),
        step_count: record.entries.len() as u64,
    })
}

/// Writes `<dir>/trajectory.jsonl`, creating the directory if needed.
pub fn write_to_dir(record: &TrajectoryRecord, dir: impl AsRef<Path>) -> Result<PathBuf, TrajectoryError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let path = dir.join(TRAJECTORY_FILE);
    let file = std::fs::File::create(&path)?;
    write_jsonl(record, std::io::BufWriter::new(file))?;
    Ok(path)
}

/// Parses and validates a JSONL trajectory stream back into a record.
///
/// Validation covers line ordering (header, steps, footer), the schema
/// version, step-count consistency, strictly increasing step indices,
/// parseable action text, plan revision numbering, and the status/answer
/// coupling on the final state.
pub fn read_jsonl(r: impl BufRead) -> Result<TrajectoryRecord, TrajectoryError> {
    let mut header: Option<(Task, RunConfigSnapshot)> = None;
    let mut entries: Vec<MemoryEntry> = Vec::new();
    let mut footer: Option<(TaskState, f64, Option<FailureComponent>, Vec<Plan>, u64)> = None;

    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if footer.is_some() {
            return Err(TrajectoryError::Malformed(format!(
                "line {} appears after the footer",
                lineno + 1
            )));
        }
        let parsed: TrajectoryLine = serde_json::from_str(&line)
            .map_err(|e| TrajectoryError::Malformed(format!("line {}: {e}", lineno + 1)))?;
        match parsed {
            TrajectoryLine::Header { schema_version, task, config } => {
                if schema_version != SCHEMA_VERSION {
                    return Err(TrajectoryError::UnsupportedSchema(schema_version));
                }
                if header.is_some() {
                    return Err(TrajectoryError::Malformed("duplicate header".into()));
                }
                header = Some((task, config));
            }
            TrajectoryLine::Step {
                step_index,
                action,
                directive,
                delta_summary,
                verdict,
                state_before,
                state_after,
                screenshot_before,
                screenshot_after,
                fingerprint_after,
            } => {
                if header.is_none() {
                    return Err(TrajectoryError::Malformed("step before header".into()));
                }
                let action = parse_action(&action).map_err(|e| {
                    TrajectoryError::Malformed(format!("step {step_index}: bad action: {e}"))
                })?;
                if let Some(last) = entries.last() {
                    if step_index <= last.step_index {
                        return Err(TrajectoryError::Malformed(format!(
                            "step index {step_index} is not increasing"
                        )));
                    }
                }
                entries.push(MemoryEntry {
                    step_index,
                    action,
                    directive,
                    delta_summary,
                    state_before,
                    state_after,
                    verdict,
                    screenshot_ref_before: screenshot_before,
                    screenshot_ref_after: screenshot_after,
                    fingerprint_after: StateFingerprint(fingerprint_after),
                });
            }
            TrajectoryLine::Footer { final_state, wall_seconds, failure_attribution, plans, step_count } => {
                if header.is_none() {
                    return Err(TrajectoryError::Malformed("footer before header".into()));
                }
                footer = Some((final_state, wall_seconds, failure_attribution, plans, step_count));
            }
        }
    }

    let (task, config) = header.ok_or(TrajectoryError::Truncated)?;
    let (final_state, wall_seconds, failure_attribution, plans, step_count) =
        footer.ok_or(TrajectoryError::Truncated)?;

    if step_count != entries.len() as u64 {
        return Err(TrajectoryError::Malformed(format!(
            "footer claims {step_count} steps but {} were recorded",
            entries.len()
        )));
    }
    for (i, plan) in plans.iter().enumerate() {
        if plan.revision != i as u32 {
            return Err(TrajectoryError::Malformed(format!(
                "plan {} has revision {}, expected {}",
                i, plan.revision, i
            )));
        }
    }
    let has_answer = final_state.answer.as_deref().is_some_and(|a| !a.is_empty());
    if (final_state.status == TaskStatus::Complete) != has_answer {
        return Err(TrajectoryError::Malformed(
            "final state must carry an answer exactly when complete".into(),
        ));
    }

    Ok(TrajectoryRecord {
        schema_version: SCHEMA_VERSION,
        task,
        config,
        plans,
        entries,
        final_state,
        wall_seconds,
        failure_attribution,
    })
}

/// Reads and validates a trajectory file.
pub fn read_from_file(path: impl AsRef<Path>) -> Result<TrajectoryRecord, TrajectoryError> {
    let file = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::Outcome;
    use crate::grammar::{ActionCommand, Extent, Point};

    fn sample_record() -> TrajectoryRecord {
        let state = |i: u64| TaskState {
            status: TaskStatus::InProgress,
            step_index: i,
            answer: None,
        };
        let entry = MemoryEntry {
            step_index: 1,
            action: ActionCommand::Click { point: Point::model(10, 20) },
            directive: "Click the button".into(),
            delta_summary: "page changed".into(),
            state_before: state(0),
            state_after: state(1),
            verdict: ProgressVerdict::new(Outcome::Advanced, "page changed", false),
            screenshot_ref_before: "aaa".into(),
            screenshot_ref_after: "bbb".into(),
            fingerprint_after: StateFingerprint(42),
        };
        TrajectoryRecord {
            schema_version: SCHEMA_VERSION,
            task: Task::new("t1", "do the thing"),
            config: RunConfigSnapshot::default_with_viewport(Extent::new(1280, 800)),
            plans: vec![Plan { steps: vec!["step".into()], revision: 0 }],
            entries: vec![entry],
            final_state: TaskState {
                status: TaskStatus::Complete,
                step_index: 1,
                answer: Some("done".into()),
            },
            wall_seconds: 1.25,
            failure_attribution: None,
        }
    }

    #[test]
    fn round_trips_through_jsonl() {
        let record = sample_record();
        let mut buf = Vec::new();
        write_jsonl(&record, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        let back = read_jsonl(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, record);
    }

    #[test]
    fn truncated_stream_is_rejected() {
        let record = sample_record();
        let mut buf = Vec::new();
        write_jsonl(&record, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: String =
            text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert_eq!(
            read_jsonl(std::io::Cursor::new(truncated.into_bytes())).unwrap_err(),
            TrajectoryError::Truncated
        );
    }

    #[test]
    fn step_count_mismatch_is_rejected() {
        let record = sample_record();
        let mut buf = Vec::new();
        write_jsonl(&record, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let without_step: String = text
            .lines()
            .filter(|l| !l.contains("\"step\""))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(matches!(
            read_jsonl(std::io::Cursor::new(without_step.into_bytes())).unwrap_err(),
            TrajectoryError::Malformed(_)
        ));
    }

    #[test]
    fn garbage_line_is_rejected() {
        assert!(matches!(
            read_jsonl(std::io::Cursor::new(b"not json\n".to_vec())).unwrap_err(),
            TrajectoryError::Malformed(_)
        ));
    }

    #[test]
    fn memory_store_round_trips_by_content_hash() {
        let mut store = MemoryScreenshotStore::new();
        let r = store.store(b"pngbytes");
        assert_eq!(r, content_ref(b"pngbytes"));
        assert_eq!(store.load(&r).unwrap(), b"pngbytes");
        assert_eq!(store.load("missing"), None);
    }

    #[test]
    fn dir_store_writes_one_file_per_hash() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = DirScreenshotStore::new(dir.path());
        let a = store.store(b"one");
        let again = store.store(b"one");
        assert_eq!(a, again);
        assert!(store.errors().is_empty());
        assert_eq!(store.load(&a).unwrap(), b"one");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn write_to_dir_creates_trajectory_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_to_dir(&sample_record(), dir.path()).unwrap();
        assert!(path.ends_with(TRAJECTORY_FILE));
        let back = read_from_file(&path).unwrap();
        assert_eq!(back, sample_record());
    }
}
