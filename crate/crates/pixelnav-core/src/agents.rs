//! The agent roles: planner, reasoner, visual grounder, and verifier, plus
//! plan revision.
//!
//! Each operation assembles its prompt from the canonical resources in
//! `resources/prompts/`, sends it through a [`RoleBackend`], and parses the
//! constrained reply. Prompt texts are shipped as versioned files so golden
//! tests can diff them; placeholders use `{name}` syntax.

use crate::browser::Screenshot;
use crate::gateway::{ChatMessage, GatewayError, RoleBackend};
use crate::grammar::{self, GrammarError, ModelTurn};
use crate::memory::EpisodicMemory;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Canonical prompt texts. These are the byte-exact resources the golden
/// tests pin; edit the files, not call sites.
pub mod prompts {
    pub const PLANNER_SYSTEM: &str = include_str!("../resources/prompts/planner_system.txt");
    pub const PLANNER_USER: &str = include_str!("../resources/prompts/planner_user.txt");
    pub const REASONER_SYSTEM: &str = include_str!("../resources/prompts/reasoner_system.txt");
    pub const REASONER_USER: &str = include_str!("../resources/prompts/reasoner_user.txt");
    pub const GROUNDER: &str = include_str!("../resources/prompts/grounder.txt");
    pub const VERIFIER_SYSTEM: &str = include_str!("../resources/prompts/verifier_system.txt");
    pub const VERIFIER_USER: &str = include_str!("../resources/prompts/verifier_user.txt");

    /// Substitutes `{name}` placeholders. Unlisted placeholders are left
    /// untouched.
    pub fn fill(template: &str, substitutions: &[(&str, &str)]) -> String {
        let mut out = template.to_string();
        for (name, value) in substitutions {
            out = out.replace(&format!("{{{name}}}"), value);
        }
        out
    }
}

/// The user-issued task driving one session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    /// The instruction text; must be nonempty.
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_url: Option<String>,
    /// Wall-clock budget for the whole run.
    pub deadline_seconds: u64,
}

impl Task {
    pub const DEFAULT_DEADLINE_SECONDS: u64 = 600;

    pub fn new(id: impl Into<String>, instruction: impl Into<String>) -> Self {
        Task {
            id: id.into(),
            instruction: instruction.into(),
            start_url: None,
            deadline_seconds: Self::DEFAULT_DEADLINE_SECONDS,
        }
    }

    pub fn with_start_url(mut self, url: impl Into<String>) -> Self {
        self.start_url = Some(url.into());
        self
    }

    pub fn with_deadline(mut self, seconds: u64) -> Self {
        self.deadline_seconds = seconds;
        self
    }
}

/// An ordered step list with a revision counter that increments on every
/// successful re-plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<String>,
    pub revision: u32,
}

impl Plan {
    /// Numbered-list rendering used in the reasoner prompt.
    pub fn render_numbered(&self) -> String {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, step)| format!("{}. {}", i + 1, step))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Sentinel the reasoner emits at the start of its action tag when the task
/// is done. Matched case-sensitively and only at the start, so a directive
/// that merely mentions the word is not a completion.
pub const FINISHED_SENTINEL: &str = "FINISHED";

/// One reasoner reply: rationale plus either a next-step directive or a
/// completion with the final answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonerTurn {
    pub reasoning: String,
    /// The verbatim action tag content.
    pub directive: String,
    pub finished: bool,
    pub final_answer: Option<String>,
}

/// Categorical progress judgment comparing pre/post-action screenshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Advanced,
    Stalled,
    Regressed,
}

impl Outcome {
    pub fn is_advanced(self) -> bool {
        self == Outcome::Advanced
    }

    fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "advanced" => Some(Outcome::Advanced),
            "stalled" => Some(Outcome::Stalled),
            "regressed" => Some(Outcome::Regressed),
            _ => None,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Advanced => "advanced",
            Outcome::Stalled => "stalled",
            Outcome::Regressed => "regressed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgressVerdict {
    pub outcome: Outcome,
    pub rationale: String,
    pub task_complete: bool,
}

impl ProgressVerdict {
    /// Task completion implies progress, so `task_complete` forces the
    /// outcome to `advanced`.
    pub fn new(outcome: Outcome, rationale: impl Into<String>, task_complete: bool) -> Self {
        let outcome = if task_complete { Outcome::Advanced } else { outcome };
        ProgressVerdict { outcome, rationale: rationale.into(), task_complete }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("planner response contained no <step> tags")]
    NoStepsFound,
    #[error("reasoner output malformed after retry: {0}")]
    MalformedReasonerOutput(String),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Extracts every `<tag>...</tag>` region in order, trimmed.
fn extract_tag_regions(text: &str, tag: &str) -> Vec<String> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find(&open) {
        let after = &rest[start + open.len()..];
        match after.find(&close) {
            Some(end) => {
                out.push(after[..end].trim().to_string());
                rest = &after[end + close.len()..];
            }
            None => break,
        }
    }
    out
}

fn extract_steps(text: &str) -> Vec<String> {
    extract_tag_regions(text, "step").into_iter().filter(|s| !s.is_empty()).collect()
}

/// Asks the planner for an initial plan (revision 0).
pub fn plan(task: &Task, backend: &RoleBackend) -> Result<Plan, AgentError> {
    let user = prompts::fill(prompts::PLANNER_USER, &[("task", &task.instruction)]);
    let response = backend.complete(Some(prompts::PLANNER_SYSTEM), vec![ChatMessage::user(user)])?;
    let steps = extract_steps(&response.text);
    if steps.is_empty() {
        return Err(AgentError::NoStepsFound);
    }
    Ok(Plan { steps, revision: 0 })
}

fn parse_reasoner_reply(text: &str) -> Result<ReasonerTurn, String> {
    let reasoning = extract_tag_regions(text, "reasoning").into_iter().next().unwrap_or_default();
    let directive = extract_tag_regions(text, "action")
        .into_iter()
        .next()
        .ok_or_else(|| "missing <action> tag".to_string())?;

    let finished = match directive.strip_prefix(FINISHED_SENTINEL) {
        // Guard against identifiers that merely start with the sentinel.
        Some(rest) => !rest.starts_with(|c: char| c.is_ascii_alphanumeric()),
        None => false,
    };
    if !finished {
        return Ok(ReasonerTurn { reasoning, directive, finished: false, final_answer: None });
    }

    let rest = directive[FINISHED_SENTINEL.len()..].trim_start();
    let answer = rest.strip_prefix('+').unwrap_or(rest).trim().to_string();
    let final_answer = if !answer.is_empty() {
        answer
    } else if !reasoning.is_empty() {
        // Completion without an explicit answer: fall back to the rationale
        // so a complete turn always carries a nonempty answer.
        reasoning.clone()
    } else {
        "(no answer provided)".to_string()
    };
    Ok(ReasonerTurn { reasoning, directive, finished: true, final_answer: Some(final_answer) })
}

/// Asks the reasoner for the next step given the plan, rendered history, and
/// the current screenshot. Malformed output is reprompted once with the
/// parse error appended.
pub fn reason(
    plan: &Plan,
    memory: &EpisodicMemory,
    screenshot: &Screenshot,
    backend: &RoleBackend,
) -> Result<ReasonerTurn, AgentError> {
    let user_text = prompts::fill(
        prompts::REASONER_USER,
        &[
            ("plan", &plan.render_numbered()),
            ("history", &memory.render_history(memory.capacity())),
        ],
    );
    let attachment = screenshot.attachment();

    let first = backend.complete(
        Some(prompts::REASONER_SYSTEM),
        vec![ChatMessage::user_with_images(&user_text, vec![attachment.clone()])],
    )?;
    let first_err = match parse_reasoner_reply(&first.text) {
        Ok(turn) => return Ok(turn),
        Err(err) => err,
    };

    let retry_text = format!(
        "{user_text}\n\nYour previous reply could not be parsed: {first_err}. \
         Respond again using the required <reasoning> and <action> tags."
    );
    let second = backend.complete(
        Some(prompts::REASONER_SYSTEM),
        vec![ChatMessage::user_with_images(retry_text, vec![attachment])],
    )?;
    parse_reasoner_reply(&second.text).map_err(AgentError::MalformedReasonerOutput)
}

/// Assembles the grounding prompt for a directive. Also used by the click
/// benchmark so harness and agent send identical bytes.
pub fn grounder_prompt(directive: &str) -> String {
    // The grounding model is fine-tuned for English output.
    prompts::fill(prompts::GROUNDER, &[("language", "English"), ("instruction", directive)])
}

const EMPTY_HISTORY: &str = "(no prior actions)";

fn grounder_messages(
    prompt: &str,
    screenshot: &Screenshot,
    action_history: &str,
) -> Vec<ChatMessage> {
    if action_history.trim().is_empty() || action_history == EMPTY_HISTORY {
        vec![ChatMessage::user_with_images(prompt, vec![screenshot.attachment()])]
    } else {
        // History rides as a prior assistant turn; the final user message
        // carries the current screenshot.
        vec![
            ChatMessage::user(prompt),
            ChatMessage::assistant(action_history),
            ChatMessage::user_with_images("(current screenshot)", vec![screenshot.attachment()]),
        ]
    }
}

/// Grounds a natural-language directive into one typed action. A grammar
/// failure is reprompted once with the parse error appended; a second
/// failure surfaces the error. `finished(content='STUCK')` is a valid turn,
/// not an error.
pub fn ground(
    directive: &str,
    screenshot: &Screenshot,
    action_history: &str,
    backend: &RoleBackend,
) -> Result<ModelTurn, AgentError> {
    let prompt = grounder_prompt(directive);
    // The grounding model is not a chat model: no system prompt.
    let first = backend.complete(None, grounder_messages(&prompt, screenshot, action_history))?;
    let first_err = match grammar::parse_model_output(&first.text) {
        Ok(turn) => return Ok(turn),
        Err(err) => err,
    };

    let retry_prompt = format!(
        "{prompt}\n\nYour previous reply could not be parsed: {first_err}. \
         Reply with exactly one Thought/Action block."
    );
    let second =
        backend.complete(None, grounder_messages(&retry_prompt, screenshot, action_history))?;
    grammar::parse_model_output(&second.text).map_err(AgentError::Grammar)
}

fn value_after<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let upper = line.to_ascii_uppercase();
    upper.starts_with(key).then(|| line[key.len()..].trim())
}

fn parse_yes(s: &str) -> bool {
    matches!(s.to_ascii_lowercase().as_str(), "yes" | "true" | "y")
}

/// Parses a verifier reply. Total: every possible string maps to a verdict;
/// anything unparseable defaults to stalled.
pub fn parse_verifier_reply(text: &str) -> ProgressVerdict {
    let mut outcome = None;
    let mut complete = false;
    let mut rationale = None;
    for raw in text.lines() {
        let line = raw.trim();
        if let Some(value) = value_after(line, "OUTCOME:") {
            outcome = Outcome::parse(value.split_whitespace().next().unwrap_or(""));
        } else if let Some(value) = value_after(line, "COMPLETE:") {
            complete = parse_yes(value.split_whitespace().next().unwrap_or(""));
        } else if let Some(value) = value_after(line, "WHY:") {
            rationale = Some(value.to_string());
        }
    }
    match outcome {
        Some(outcome) => ProgressVerdict::new(
            outcome,
            rationale.unwrap_or_else(|| "no rationale given".to_string()),
            complete,
        ),
        None => ProgressVerdict::new(Outcome::Stalled, "unparseable verifier output", false),
    }
}

/// Judges whether an attempted step advanced the task by comparing the
/// before/after screenshots.
pub fn verify(
    before: &Screenshot,
    after: &Screenshot,
    directive: &str,
    plan: &Plan,
    task: &Task,
    backend: &RoleBackend,
) -> Result<ProgressVerdict, AgentError> {
    let user = prompts::fill(
        prompts::VERIFIER_USER,
        &[
            ("task", &task.instruction),
            ("plan", &plan.render_numbered()),
            ("directive", directive),
        ],
    );
    let message =
        ChatMessage::user_with_images(user, vec![before.attachment(), after.attachment()]);
    let response = backend.complete(Some(prompts::VERIFIER_SYSTEM), vec![message])?;
    Ok(parse_verifier_reply(&response.text))
}

/// Re-plans after a non-advanced verdict. Degrades to the old plan on any
/// failure so the loop guard, not the planner, terminates pathological runs.
pub fn update_plan(
    plan: &Plan,
    memory: &EpisodicMemory,
    task: &Task,
    backend: &RoleBackend,
) -> Plan {
    let base = prompts::fill(prompts::PLANNER_USER, &[("task", &task.instruction)]);
    let user = format!(
        "{base}\n\nThe previous plan did not succeed.\nPrevious plan:\n{}\n\nRecent action history:\n{}\n\nProduce a revised plan.",
        plan.render_numbered(),
        memory.render_history(memory.capacity()),
    );
    let response = match backend.complete(Some(prompts::PLANNER_SYSTEM), vec![ChatMessage::user(user)])
    {
        Ok(r) => r,
        Err(_) => return plan.clone(),
    };
    let steps = extract_steps(&response.text);
    if steps.is_empty() {
        plan.clone()
    } else {
        Plan { steps, revision: plan.revision + 1 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{scripted_backend, MessageRole};
    use crate::grammar::{ActionCommand, Point};
    use crate::memory::{EpisodicMemory, MemoryEntry, StateFingerprint};
    use crate::orchestrator::{TaskState, TaskStatus};
    use std::sync::Arc;

    fn role(backend: Arc<crate::gateway::ScriptedBackend>) -> RoleBackend {
        RoleBackend::new(backend, "test-model")
    }

    fn shot() -> Screenshot {
        Screenshot::new(vec![1, 2, 3], 4, 4, "sim://home")
    }

    fn task() -> Task {
        Task::new("t1", "Find the answer")
    }

    fn sample_plan() -> Plan {
        Plan { steps: vec!["Go to site".into(), "Search X".into()], revision: 0 }
    }

    fn memory_with_stalled(n: u64) -> EpisodicMemory {
        let mut memory = EpisodicMemory::new(10);
        for i in 1..=n {
            let state =
                TaskState { status: TaskStatus::InProgress, step_index: i, answer: None };
            memory
                .append(MemoryEntry {
                    step_index: i,
                    action: ActionCommand::Click { point: Point::model(1, 1) },
                    directive: format!("try {i}"),
                    delta_summary: format!("nothing changed {i}"),
                    state_before: state.clone(),
                    state_after: state,
                    verdict: ProgressVerdict::new(Outcome::Stalled, "no change", false),
                    screenshot_ref_before: "a".into(),
                    screenshot_ref_after: "b".into(),
                    fingerprint_after: StateFingerprint(1),
                })
                .unwrap();
        }
        memory
    }

    #[test]
    fn plan_extracts_step_tags_in_order() {
        let backend = scripted_backend(["<step>Go to site</step><step>Search X</step>"]);
        let plan = plan(&task(), &role(backend)).unwrap();
        assert_eq!(plan.steps, vec!["Go to site".to_string(), "Search X".to_string()]);
        assert_eq!(plan.revision, 0);
    }

    #[test]
    fn plan_ignores_surrounding_prose() {
        let backend = scripted_backend([
            "Sure! Here is the plan:\n<step> One </step>\nnotes\n<step>Two</step>\ndone",
        ]);
        let plan = plan(&task(), &role(backend)).unwrap();
        assert_eq!(plan.steps, vec!["One".to_string(), "Two".to_string()]);
    }

    #[test]
    fn plan_without_tags_is_no_steps_found() {
        let backend = scripted_backend(["1. Go somewhere\n2. Do something"]);
        assert_eq!(plan(&task(), &role(backend)).unwrap_err(), AgentError::NoStepsFound);
    }

    #[test]
    fn plan_sends_canonical_prompts() {
        let backend = scripted_backend(["<step>Go</step>"]);
        plan(&task(), &role(backend.clone())).unwrap();
        let seen = backend.received();
        assert_eq!(seen[0].system_prompt.as_deref(), Some(prompts::PLANNER_SYSTEM));
        let expected = prompts::PLANNER_USER.replace("{task}", "Find the answer");
        assert_eq!(seen[0].messages[0].text, expected);
    }

    #[test]
    fn reason_parses_directive() {
        let backend =
            scripted_backend(["<reasoning>r</reasoning><action>Click the Login button</action>"]);
        let turn = reason(&sample_plan(), &EpisodicMemory::new(5), &shot(), &role(backend)).unwrap();
        assert!(!turn.finished);
        assert_eq!(turn.directive, "Click the Login button");
        assert_eq!(turn.reasoning, "r");
        assert_eq!(turn.final_answer, None);
    }

    #[test]
    fn reason_detects_finished_sentinel() {
        let backend = scripted_backend([
            "<reasoning>done</reasoning><action>FINISHED The answer is 42</action>",
        ]);
        let turn = reason(&sample_plan(), &EpisodicMemory::new(5), &shot(), &role(backend)).unwrap();
        assert!(turn.finished);
        assert_eq!(turn.final_answer.as_deref(), Some("The answer is 42"));
    }

    #[test]
    fn reason_strips_plus_separator() {
        let backend =
            scripted_backend(["<reasoning>d</reasoning><action>FINISHED + it is done</action>"]);
        let turn = reason(&sample_plan(), &EpisodicMemory::new(5), &shot(), &role(backend)).unwrap();
        assert_eq!(turn.final_answer.as_deref(), Some("it is done"));
    }

    #[test]
    fn finished_sentinel_not_matched_mid_directive() {
        let backend = scripted_backend([
            "<reasoning>r</reasoning><action>Click the button labeled FINISHED</action>",
        ]);
        let turn = reason(&sample_plan(), &EpisodicMemory::new(5), &shot(), &role(backend)).unwrap();
        assert!(!turn.finished);
    }

    #[test]
    fn finished_without_answer_falls_back_to_reasoning() {
        let backend =
            scripted_backend(["<reasoning>the page shows 7</reasoning><action>FINISHED</action>"]);
        let turn = reason(&sample_plan(), &EpisodicMemory::new(5), &shot(), &role(backend)).unwrap();
        assert!(turn.finished);
        assert_eq!(turn.final_answer.as_deref(), Some("the page shows 7"));
    }

    #[test]
    fn reason_retries_once_then_errors() {
        let backend = scripted_backend(["no tags here", "still no tags"]);
        let err = reason(&sample_plan(), &EpisodicMemory::new(5), &shot(), &role(backend.clone()))
            .unwrap_err();
        assert!(matches!(err, AgentError::MalformedReasonerOutput(_)));
        let seen = backend.received();
        assert_eq!(seen.len(), 2);
        assert!(seen[1].messages[0].text.contains("could not be parsed"));
    }

    #[test]
    fn reason_recovers_on_retry() {
        let backend = scripted_backend([
            "garbage",
            "<reasoning>ok</reasoning><action>Click it</action>",
        ]);
        let turn = reason(&sample_plan(), &EpisodicMemory::new(5), &shot(), &role(backend)).unwrap();
        assert_eq!(turn.directive, "Click it");
    }

    #[test]
    fn reason_prompt_contains_numbered_plan_and_history() {
        let backend = scripted_backend(["<reasoning>r</reasoning><action>a</action>"]);
        reason(&sample_plan(), &memory_with_stalled(2), &shot(), &role(backend.clone())).unwrap();
        let text = &backend.received()[0].messages[0].text;
        assert!(text.contains("1. Go to site\n2. Search X"));
        assert!(text.contains("#1 click(point='<point>1 1</point>') → stalled: nothing changed 1"));
        assert_eq!(backend.received()[0].messages[0].images.len(), 1);
    }

    #[test]
    fn ground_parses_click_turn() {
        let backend =
            scripted_backend(["Thought: aim\nAction: click(point='<point>100 200</point>')"]);
        let turn = ground("Click the search box", &shot(), "(no prior actions)", &role(backend))
            .unwrap();
        assert_eq!(turn.action, ActionCommand::Click { point: Point::model(100, 200) });
    }

    #[test]
    fn ground_returns_stuck_as_valid_turn() {
        let backend = scripted_backend(["Thought: blocked\nAction: finished(content='STUCK')"]);
        let turn = ground("Do anything", &shot(), "(no prior actions)", &role(backend)).unwrap();
        assert_eq!(turn.action, ActionCommand::Finished { content: "STUCK".into() });
    }

    #[test]
    fn ground_surfaces_grammar_error_after_retry() {
        let backend = scripted_backend(["garbage", "more garbage"]);
        let err =
            ground("Click", &shot(), "(no prior actions)", &role(backend.clone())).unwrap_err();
        assert!(matches!(err, AgentError::Grammar(GrammarError::MalformedOutput)));
        assert_eq!(backend.received().len(), 2);
    }

    #[test]
    fn ground_sends_templated_prompt_and_image() {
        let backend = scripted_backend(["Thought: t\nAction: wait()"]);
        ground("Click the cart", &shot(), "(no prior actions)", &role(backend.clone())).unwrap();
        let seen = backend.received();
        assert_eq!(seen[0].system_prompt, None);
        assert_eq!(seen[0].messages.len(), 1);
        assert_eq!(seen[0].messages[0].text, grounder_prompt("Click the cart"));
        assert_eq!(seen[0].messages[0].images.len(), 1);
    }

    #[test]
    fn ground_threads_history_as_assistant_turn() {
        let backend = scripted_backend(["Thought: t\nAction: wait()"]);
        let history = "#1 wait() → advanced: loaded";
        ground("Click next", &shot(), history, &role(backend.clone())).unwrap();
        let seen = backend.received();
        assert_eq!(seen[0].messages.len(), 3);
        assert_eq!(seen[0].messages[1].role, MessageRole::Assistant);
        assert_eq!(seen[0].messages[1].text, history);
        assert_eq!(seen[0].messages[2].images.len(), 1);
    }

    #[test]
    fn verify_parses_line_keyed_reply() {
        let backend = scripted_backend(["OUTCOME: advanced\nCOMPLETE: no\nWHY: results visible"]);
        let verdict =
            verify(&shot(), &shot(), "Click", &sample_plan(), &task(), &role(backend)).unwrap();
        assert_eq!(verdict.outcome, Outcome::Advanced);
        assert!(!verdict.task_complete);
        assert_eq!(verdict.rationale, "results visible");
    }

    #[test]
    fn verify_complete_yes_sets_flag() {
        let backend = scripted_backend(["OUTCOME: advanced\nCOMPLETE: yes\nWHY: answer shown"]);
        let verdict =
            verify(&shot(), &shot(), "Click", &sample_plan(), &task(), &role(backend)).unwrap();
        assert!(verdict.task_complete);
        assert_eq!(verdict.outcome, Outcome::Advanced);
    }

    #[test]
    fn verify_nonsense_defaults_to_stalled() {
        let backend = scripted_backend(["I think it went fine?"]);
        let verdict =
            verify(&shot(), &shot(), "Click", &sample_plan(), &task(), &role(backend)).unwrap();
        assert_eq!(verdict.outcome, Outcome::Stalled);
        assert_eq!(verdict.rationale, "unparseable verifier output");
        assert!(!verdict.task_complete);
    }

    #[test]
    fn verify_sends_both_screenshots() {
        let backend = scripted_backend(["OUTCOME: stalled\nCOMPLETE: no\nWHY: same page"]);
        verify(&shot(), &shot(), "Click", &sample_plan(), &task(), &role(backend.clone())).unwrap();
        assert_eq!(backend.received()[0].messages[0].images.len(), 2);
    }

    #[test]
    fn complete_flag_forces_advanced_outcome() {
        let verdict = parse_verifier_reply("OUTCOME: stalled\nCOMPLETE: yes\nWHY: shown");
        assert!(verdict.task_complete);
        assert_eq!(verdict.outcome, Outcome::Advanced);
    }

    #[test]
    fn update_plan_increments_revision() {
        let backend = scripted_backend(["<step>New approach</step>"]);
        let revised =
            update_plan(&sample_plan(), &EpisodicMemory::new(5), &task(), &role(backend));
        assert_eq!(revised.revision, 1);
        assert_eq!(revised.steps, vec!["New approach".to_string()]);
    }

    #[test]
    fn update_plan_degrades_to_old_plan_without_tags() {
        let backend = scripted_backend(["cannot help"]);
        let old = sample_plan();
        let revised = update_plan(&old, &EpisodicMemory::new(5), &task(), &role(backend));
        assert_eq!(revised, old);
    }

    #[test]
    fn update_plan_degrades_on_backend_error() {
        let backend = scripted_backend(Vec::<String>::new());
        let old = sample_plan();
        let revised = update_plan(&old, &EpisodicMemory::new(5), &task(), &role(backend));
        assert_eq!(revised, old);
    }

    #[test]
    fn update_plan_prompt_carries_rendered_memory() {
        let backend = scripted_backend(["<step>Retry differently</step>"]);
        let memory = memory_with_stalled(3);
        update_plan(&sample_plan(), &memory, &task(), &role(backend.clone()));
        let text = &backend.received()[0].messages[0].text;
        for i in 1..=3 {
            assert!(text.contains(&format!("nothing changed {i}")));
        }
    }
}
