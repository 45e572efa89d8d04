//! The agent loop, end to end: plan once, then reason → ground → execute →
//! verify → memory update → progress branch, under deadline, step, and
//! loop-guard limits.
//!
//! One run is internally sequential. Multiple runs may execute concurrently
//! with disjoint environment handles and shared stateless backends; the
//! benchmark harness relies on that.

use crate::agents::{self, Outcome, Plan, ProgressVerdict, Task};
use crate::browser::{EnvError, Screenshot, WebEnvironment};
use crate::gateway::{ChatMessage, GatewayError, ImageAttachment, RoleBackend, RoleBackends};
use crate::grammar::{scale_point, ActionCommand, Extent};
use crate::memory::{EpisodicMemory, MemoryEntry, StateFingerprint};
use crate::trajectory::{ScreenshotStore, SCHEMA_VERSION};
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    InProgress,
    Complete,
    Stuck,
    TimedOut,
    StepLimit,
    LoopDetected,
}

impl TaskStatus {
    pub fn is_terminal(self) -> bool {
        self != TaskStatus::InProgress
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskStatus::InProgress => "in_progress",
            TaskStatus::Complete => "complete",
            TaskStatus::Stuck => "stuck",
            TaskStatus::TimedOut => "timed_out",
            TaskStatus::StepLimit => "step_limit",
            TaskStatus::LoopDetected => "loop_detected",
        }
    }
}

impl fmt::Display for TaskStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Task progression marker. `step_index` counts verified advances, not raw
/// actions; it moves only on an advanced verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskState {
    pub status: TaskStatus,
    pub step_index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

impl TaskState {
    pub fn initial() -> Self {
        TaskState { status: TaskStatus::InProgress, step_index: 0, answer: None }
    }
}

/// Component blamed for a failed run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureComponent {
    Planning,
    Reasoning,
    Action,
    Verification,
}

impl FailureComponent {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureComponent::Planning => "planning",
            FailureComponent::Reasoning => "reasoning",
            FailureComponent::Action => "action",
            FailureComponent::Verification => "verification",
        }
    }
}

impl fmt::Display for FailureComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Loop limits. The step cap backstops scripted-backend pathologies; the
/// loop guard catches repeat-action cycles well before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLimits {
    pub max_steps: u32,
    pub loop_window: usize,
    pub loop_threshold: usize,
    pub memory_capacity: usize,
    pub model_space: Extent,
}

impl Default for RunLimits {
    fn default() -> Self {
        RunLimits {
            max_steps: 40,
            loop_window: crate::memory::DEFAULT_LOOP_WINDOW,
            loop_threshold: crate::memory::DEFAULT_LOOP_THRESHOLD,
            memory_capacity: crate::memory::DEFAULT_CAPACITY,
            model_space: Extent::DEFAULT_MODEL_SPACE,
        }
    }
}

/// Reproducibility snapshot embedded in every trajectory header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfigSnapshot {
    pub viewport: Extent,
    pub model_space: Extent,
    pub max_steps: u32,
    pub loop_window: usize,
    pub loop_threshold: usize,
    pub memory_capacity: usize,
    pub deadline_seconds: u64,
}

impl RunConfigSnapshot {
    pub fn new(viewport: Extent, limits: &RunLimits, deadline_seconds: u64) -> Self {
        RunConfigSnapshot {
            viewport,
            model_space: limits.model_space,
            max_steps: limits.max_steps,
            loop_window: limits.loop_window,
            loop_threshold: limits.loop_threshold,
            memory_capacity: limits.memory_capacity,
            deadline_seconds,
        }
    }

    pub fn default_with_viewport(viewport: Extent) -> Self {
        Self::new(viewport, &RunLimits::default(), Task::DEFAULT_DEADLINE_SECONDS)
    }
}

/// Persisted full run: every plan revision, the complete unpruned step log,
/// the final state, and timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub schema_version: u32,
    pub task: Task,
    pub config: RunConfigSnapshot,
    pub plans: Vec<Plan>,
    pub entries: Vec<MemoryEntry>,
    pub final_state: TaskState,
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_attribution: Option<FailureComponent>,
}

const VERIFIER_COMPLETE_FALLBACK: &str = "(task reported complete by verifier)";

struct RunCursor<'a> {
    task: &'a Task,
    backends: &'a RoleBackends,
    limits: &'a RunLimits,
    started: Instant,
    deadline: Duration,
    state: TaskState,
    memory: EpisodicMemory,
    log: Vec<MemoryEntry>,
    plans: Vec<Plan>,
    attribution: Option<FailureComponent>,
}

impl RunCursor<'_> {
    fn expired(&self) -> bool {
        self.started.elapsed() >= self.deadline
    }

    fn finish(&mut self, status: TaskStatus) {
        if !self.state.status.is_terminal() {
            self.state.status = status;
        }
    }

    fn fail(&mut self, component: FailureComponent) {
        self.finish(TaskStatus::Stuck);
        self.attribution = Some(component);
    }
}

/// Runs one task to a terminal state. Never returns an error: every failure
/// mode is a terminal status in the record, and unrecoverable environment or
/// backend errors become `stuck` with a component attribution.
pub fn run_task(
    task: &Task,
    backends: &RoleBackends,
    env: &mut dyn WebEnvironment,
    limits: &RunLimits,
    store: &mut dyn ScreenshotStore,
) -> TrajectoryRecord {
    let viewport = env.viewport();
    let mut run = RunCursor {
        task,
        backends,
        limits,
        started: Instant::now(),
        deadline: Duration::from_secs(task.deadline_seconds),
        state: TaskState::initial(),
        memory: EpisodicMemory::new(limits.memory_capacity),
        log: Vec::new(),
        plans: Vec::new(),
        attribution: None,
    };

    if let Some(url) = &task.start_url {
        // Navigation failures surface visually; only session errors abort.
        if env.navigate(url).is_err() {
            run.fail(FailureComponent::Action);
        }
    }

    if !run.state.status.is_terminal() {
        // Planning always runs; deadline checks begin with the loop so the
        // plan is on record even for a zero-second budget.
        match agents::plan(task, &backends.planner) {
            Ok(plan) => run.plans.push(plan),
            Err(_) => run.fail(FailureComponent::Planning),
        }
    }

    while !run.state.status.is_terminal() {
        step_once(&mut run, env, viewport, store);
    }

    TrajectoryRecord {
        schema_version: SCHEMA_VERSION,
        task: task.clone(),
        config: RunConfigSnapshot::new(viewport, limits, task.deadline_seconds),
        plans: run.plans,
        entries: run.log,
        final_state: run.state,
        wall_seconds: run.started.elapsed().as_secs_f64(),
        failure_attribution: run.attribution,
    }
}

/// One iteration of the loop. Terminal conditions set the cursor status.
fn step_once(
    run: &mut RunCursor<'_>,
    env: &mut dyn WebEnvironment,
    viewport: Extent,
    store: &mut dyn ScreenshotStore,
) {
    if run.expired() {
        return run.finish(TaskStatus::TimedOut);
    }
    if run.log.len() as u32 >= run.limits.max_steps {
        return run.finish(TaskStatus::StepLimit);
    }

    let plan = run.plans.last().expect("plan exists while in progress").clone();

    let before = match env.screenshot() {
        Ok(shot) => shot,
        Err(_) => return run.fail(FailureComponent::Action),
    };

    // Reasoning (deadline is checked before every model call).
    if run.expired() {
        return run.finish(TaskStatus::TimedOut);
    }
    let turn = match agents::reason(&plan, &run.memory, &before, &run.backends.reasoner) {
        Ok(turn) => turn,
        Err(_) => return run.fail(FailureComponent::Reasoning),
    };
    if turn.finished {
        run.state.answer = turn.final_answer;
        return run.finish(TaskStatus::Complete);
    }

    // Grounding.
    if run.expired() {
        return run.finish(TaskStatus::TimedOut);
    }
    let history = run.memory.render_history(run.memory.capacity());
    let grounded =
        match agents::ground(&turn.directive, &before, &history, &run.backends.grounder) {
            Ok(grounded) => grounded,
            Err(_) => return run.fail(FailureComponent::Action),
        };
    if matches!(grounded.action, ActionCommand::Finished { .. }) {
        // The grounder gave up (the STUCK escape hatch); no answer exists.
        return run.finish(TaskStatus::Stuck);
    }

    // Execution.
    let pixel_action = match grounded.action.to_pixel_space(run.limits.model_space, viewport) {
        Ok(action) => action,
        Err(_) => return run.fail(FailureComponent::Action),
    };
    if env.execute(&pixel_action).is_err() {
        return run.fail(FailureComponent::Action);
    }
    let after = match env.screenshot() {
        Ok(shot) => shot,
        Err(_) => return run.fail(FailureComponent::Action),
    };
    let step_index = run.log.len() as u64 + 1;

    // Verification. An executed action must appear in the log exactly once,
    // so the paths that cannot produce a verdict record a synthetic one.
    let (verdict, verify_failure) = if run.expired() {
        (
            ProgressVerdict::new(Outcome::Stalled, "deadline reached before verification", false),
            Some(TaskStatus::TimedOut),
        )
    } else {
        match agents::verify(&before, &after, &turn.directive, &plan, run.task, &run.backends.verifier)
        {
            Ok(verdict) => (verdict, None),
            Err(_) => (
                ProgressVerdict::new(Outcome::Stalled, "verifier unavailable", false),
                Some(TaskStatus::Stuck),
            ),
        }
    };

    let mut state_after = TaskState {
        status: run.state.status,
        step_index: run.state.step_index,
        answer: None,
    };
    if verdict.outcome.is_advanced() {
        state_after.step_index += 1;
    }
    if verdict.task_complete {
        // The verifier declared completion; the reasoner owns answers, so it
        // is asked once for the final answer.
        let answer = match agents::reason(&plan, &run.memory, &after, &run.backends.reasoner) {
            Ok(t) if t.finished => t.final_answer.unwrap_or_default(),
            _ => String::new(),
        };
        let answer = if answer.is_empty() {
            if verdict.rationale.is_empty() {
                VERIFIER_COMPLETE_FALLBACK.to_string()
            } else {
                verdict.rationale.clone()
            }
        } else {
            answer
        };
        state_after.status = TaskStatus::Complete;
        state_after.answer = Some(answer);
    }

    let entry = MemoryEntry {
        step_index,
        action: grounded.action,
        directive: turn.directive,
        delta_summary: verdict.rationale.clone(),
        state_before: run.state.clone(),
        state_after: state_after.clone(),
        verdict: verdict.clone(),
        screenshot_ref_before: store.store(&before.encoded_bytes),
        screenshot_ref_after: store.store(&after.encoded_bytes),
        fingerprint_after: StateFingerprint::new(&after.url, after.perceptual_hash()),
    };
    run.log.push(entry.clone());
    run.memory.append(entry).expect("step indices strictly increase");

    if verdict.task_complete {
        run.state = state_after;
        return;
    }
    if let Some(status) = verify_failure {
        if status == TaskStatus::Stuck {
            run.attribution = Some(FailureComponent::Verification);
        }
        return run.finish(status);
    }

    if verdict.outcome.is_advanced() {
        // Adopt the advanced state; the plan stands.
        run.state = state_after;
    } else {
        // Re-plan. Revision moves only on a successful re-plan; failures
        // degrade to the old plan and the loop guard owns termination.
        if run.expired() {
            return run.finish(TaskStatus::TimedOut);
        }
        let revised = agents::update_plan(&plan, &run.memory, run.task, &run.backends.planner);
        if revised.revision != plan.revision {
            run.plans.push(revised);
        }
    }

    if run.memory.detect_loop(run.limits.loop_window, run.limits.loop_threshold) {
        run.finish(TaskStatus::LoopDetected);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttributionError {
    #[error("record is not a failed run")]
    RecordNotFailed,
    #[error("record is missing screenshots or steps")]
    IncompleteRecord,
    #[error(transparent)]
    Probe(#[from] GatewayError),
}

fn ask_yes_no(
    probe: &RoleBackend,
    question: String,
    images: Vec<Vec<u8>>,
) -> Result<bool, AttributionError> {
    let attachments = images
        .into_iter()
        .map(|png| ImageAttachment::png(base64::engine::general_purpose::STANDARD.encode(png)))
        .collect();
    let response = probe.complete(None, vec![ChatMessage::user_with_images(question, attachments)])?;
    // Anything that does not clearly say "no" passes the heuristic.
    Ok(!response.text.trim().to_ascii_lowercase().starts_with("no"))
}

/// Replays a failed run against recorded page evidence and blames the
/// earliest component whose output contradicts it: an infeasible first plan
/// step is a planning failure, a directive naming an element the page never
/// showed is a reasoning failure, an implausible click location is an action
/// failure. A record passing every probe is a verification failure, since
/// the verifier let the error through.
pub fn attribute_failure(
    record: &TrajectoryRecord,
    probe: &RoleBackend,
    store: &dyn ScreenshotStore,
) -> Result<FailureComponent, AttributionError> {
    if record.final_state.status == TaskStatus::Complete {
        return Err(AttributionError::RecordNotFailed);
    }
    let Some(plan) = record.plans.first() else {
        return Ok(FailureComponent::Planning);
    };
    let first = record.entries.first().ok_or(AttributionError::IncompleteRecord)?;
    let load = |r: &str| store.load(r).ok_or(AttributionError::IncompleteRecord);

    let start_png = load(&first.screenshot_ref_before)?;
    if let Some(step) = plan.steps.first() {
        let question = format!(
            "PLAN STEP: {step}\n\nCan this step be performed starting from the page shown in the screenshot? Answer yes or no."
        );
        if !ask_yes_no(probe, question, vec![start_png])? {
            return Ok(FailureComponent::Planning);
        }
    }

    // Earliest step that failed to advance; if every step advanced, the last
    // one is where the run stopped making sense.
    let suspect = record
        .entries
        .iter()
        .find(|e| !e.verdict.outcome.is_advanced())
        .or(record.entries.last())
        .ok_or(AttributionError::IncompleteRecord)?;
    let before_png = load(&suspect.screenshot_ref_before)?;

    let question = format!(
        "DIRECTIVE: {}\n\nDoes the page shown in the screenshot contain the element this directive refers to? Answer yes or no.",
        suspect.directive
    );
    if !ask_yes_no(probe, question, vec![before_png.clone()])? {
        return Ok(FailureComponent::Reasoning);
    }

    if let Some(point) = suspect.action.point() {
        let pixel = scale_point(point, record.config.model_space, record.config.viewport)
            .map_err(|_| AttributionError::IncompleteRecord)?;
        let question = format!(
            "An agent targeted pixel ({}, {}) in a {}x{} viewport intending: {}\n\nIs that location plausibly on the intended element in the screenshot? Answer yes or no.",
            pixel.x,
            pixel.y,
            record.config.viewport.width,
            record.config.viewport.height,
            suspect.directive
        );
        if !ask_yes_no(probe, question, vec![before_png])? {
            return Ok(FailureComponent::Action);
        }
    }

    Ok(FailureComponent::Verification)
}

/// Screenshot helper shared by tests and the replay command.
pub fn screenshot_fingerprint(shot: &Screenshot) -> StateFingerprint {
    StateFingerprint::new(&shot.url, shot.perceptual_hash())
}

/// Convenience converter for environment errors used by CLI surfaces.
pub fn env_error_is_fatal(err: &EnvError) -> bool {
    matches!(err, EnvError::SessionClosed | EnvError::LaunchFailure(_))
}
