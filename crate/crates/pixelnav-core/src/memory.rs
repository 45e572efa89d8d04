//! Bounded episodic memory for one task session.
//!
//! Stores recent action/outcome tuples, renders them for prompts, and
//! detects repetition loops over (action, page fingerprint) pairs. One
//! memory belongs to exactly one task session and is mutated by at most one
//! thread at a time.

use crate::agents::ProgressVerdict;
use crate::grammar::{serialize_action, ActionCommand};
use crate::orchestrator::TaskState;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default buffer capacity. Covers a full deadline's worth of steps at a few
/// seconds per step without unbounded prompt growth.
pub const DEFAULT_CAPACITY: usize = 20;

/// Default sliding window for loop detection.
pub const DEFAULT_LOOP_WINDOW: usize = 8;

/// Default repeat threshold for loop detection. Repeat-click/navigate-back
/// cycles trip the guard within about six steps at this setting.
pub const DEFAULT_LOOP_THRESHOLD: usize = 3;

/// Compact digest of the page state after an action: a hash over the current
/// URL and a perceptual-hash bucket of the screenshot. Cheap, and requires
/// nothing beyond pixels and the URL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateFingerprint(pub u64);

/// FNV-1a, pinned here so fingerprints are stable across runs and builds.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

impl StateFingerprint {
    /// Fingerprint from the page URL and a screenshot perceptual-hash bucket.
    pub fn new(url: &str, screenshot_phash: u64) -> Self {
        let mut bytes = Vec::with_capacity(url.len() + 8);
        bytes.extend_from_slice(url.as_bytes());
        bytes.extend_from_slice(&screenshot_phash.to_le_bytes());
        StateFingerprint(fnv1a(&bytes))
    }
}

/// One remembered step: the action taken, the observed visual delta, and the
/// task state on both sides of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    /// Action ordinal within the session, strictly increasing, 1-based.
    pub step_index: u64,
    pub action: ActionCommand,
    /// Natural-language step the action was grounded from.
    pub directive: String,
    /// Description of the visual change (the verifier's rationale).
    pub delta_summary: String,
    pub state_before: TaskState,
    pub state_after: TaskState,
    pub verdict: ProgressVerdict,
    pub screenshot_ref_before: String,
    pub screenshot_ref_after: String,
    pub fingerprint_after: StateFingerprint,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemoryError {
    #[error("entry step index {incoming} is not greater than the last stored index {last}")]
    OutOfOrderEntry { incoming: u64, last: u64 },
}

/// Bounded, chronologically ordered buffer of [`MemoryEntry`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodicMemory {
    entries: Vec<MemoryEntry>,
    capacity: usize,
}

impl EpisodicMemory {
    /// Creates an empty memory. Capacity 0 is coerced to 1 so the buffer can
    /// always hold the most recent step.
    pub fn new(capacity: usize) -> Self {
        EpisodicMemory { entries: Vec::new(), capacity: capacity.max(1) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends an entry, evicting when over capacity: oldest non-advanced
    /// entries go first (they carry the least plan-relevant signal), then
    /// strict FIFO. Deterministic so tests can assert exact contents.
    pub fn append(&mut self, entry: MemoryEntry) -> Result<(), MemoryError> {
        if let Some(last) = self.entries.last() {
            if entry.step_index <= last.step_index {
                return Err(MemoryError::OutOfOrderEntry {
                    incoming: entry.step_index,
                    last: last.step_index,
                });
            }
        }
        self.entries.push(entry);
        while self.entries.len() > self.capacity {
            let victim = self
                .entries
                .iter()
                .position(|e| !e.verdict.outcome.is_advanced())
                .unwrap_or(0);
            self.entries.remove(victim);
        }
        Ok(())
    }

    /// Renders the newest `max_entries` entries, one line each, newest last.
    /// Equal memories render byte-identical text.
    pub fn render_history(&self, max_entries: usize) -> String {
        let start = self.entries.len().saturating_sub(max_entries);
        let selected = &self.entries[start..];
        if selected.is_empty() {
            return "(no prior actions)".to_string();
        }
        selected
            .iter()
            .map(|e| {
                format!(
                    "#{} {} → {}: {}",
                    e.step_index,
                    serialize_action(&e.action),
                    e.verdict.outcome,
                    e.delta_summary
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// True iff the last `window` entries contain at least `threshold`
    /// occurrences of the same (serialized action, fingerprint-after) pair.
    pub fn detect_loop(&self, window: usize, threshold: usize) -> bool {
        let threshold = threshold.max(2);
        let start = self.entries.len().saturating_sub(window);
        let recent = &self.entries[start..];
        for (i, entry) in recent.iter().enumerate() {
            let key = (serialize_action(&entry.action), entry.fingerprint_after);
            let count = recent
                .iter()
                .skip(i)
                .filter(|e| e.fingerprint_after == key.1 && serialize_action(&e.action) == key.0)
                .count();
            if count >= threshold {
                return true;
            }
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{Outcome, ProgressVerdict};
    use crate::grammar::Point;
    use crate::orchestrator::{TaskState, TaskStatus};
    use proptest::prelude::*;

    fn verdict(outcome: Outcome) -> ProgressVerdict {
        ProgressVerdict { outcome, rationale: "r".into(), task_complete: false }
    }

    fn entry(step: u64, action: ActionCommand, outcome: Outcome) -> MemoryEntry {
        entry_with_fingerprint(step, action, outcome, StateFingerprint(7))
    }

    fn entry_with_fingerprint(
        step: u64,
        action: ActionCommand,
        outcome: Outcome,
        fingerprint: StateFingerprint,
    ) -> MemoryEntry {
        let state = TaskState { status: TaskStatus::InProgress, step_index: step, answer: None };
        MemoryEntry {
            step_index: step,
            action,
            directive: format!("step {step}"),
            delta_summary: format!("delta {step}"),
            state_before: state.clone(),
            state_after: state,
            verdict: verdict(outcome),
            screenshot_ref_before: "a".into(),
            screenshot_ref_after: "b".into(),
            fingerprint_after: fingerprint,
        }
    }

    fn click(x: u32) -> ActionCommand {
        ActionCommand::Click { point: Point::model(x, 0) }
    }

    #[test]
    fn append_to_empty() {
        let mut mem = EpisodicMemory::new(3);
        mem.append(entry(1, ActionCommand::Wait, Outcome::Advanced)).unwrap();
        assert_eq!(mem.len(), 1);
    }

    #[test]
    fn fifo_eviction_when_all_advanced() {
        let mut mem = EpisodicMemory::new(3);
        for i in 1..=4 {
            mem.append(entry(i, click(i as u32), Outcome::Advanced)).unwrap();
        }
        let steps: Vec<u64> = mem.entries().iter().map(|e| e.step_index).collect();
        assert_eq!(steps, vec![2, 3, 4]);
    }

    #[test]
    fn stalled_entries_evicted_first() {
        let mut mem = EpisodicMemory::new(3);
        mem.append(entry(1, click(1), Outcome::Stalled)).unwrap();
        mem.append(entry(2, click(2), Outcome::Advanced)).unwrap();
        mem.append(entry(3, click(3), Outcome::Advanced)).unwrap();
        mem.append(entry(4, click(4), Outcome::Advanced)).unwrap();
        let steps: Vec<u64> = mem.entries().iter().map(|e| e.step_index).collect();
        assert_eq!(steps, vec![2, 3, 4]);
    }

    #[test]
    fn eviction_matches_brute_force_oracle() {
        // Oracle: replay the append sequence keeping an unbounded list, then
        // repeatedly drop the oldest non-advanced entry (else the oldest)
        // until within capacity after each append.
        let outcomes = [
            Outcome::Stalled,
            Outcome::Advanced,
            Outcome::Regressed,
            Outcome::Advanced,
            Outcome::Advanced,
            Outcome::Stalled,
            Outcome::Advanced,
        ];
        let capacity = 3;

        let mut mem = EpisodicMemory::new(capacity);
        let mut oracle: Vec<MemoryEntry> = Vec::new();
        for (i, outcome) in outcomes.iter().enumerate() {
            let e = entry(i as u64 + 1, click(i as u32), *outcome);
            mem.append(e.clone()).unwrap();
            oracle.push(e);
            while oracle.len() > capacity {
                let victim =
                    oracle.iter().position(|e| !e.verdict.outcome.is_advanced()).unwrap_or(0);
                oracle.remove(victim);
            }
        }
        assert_eq!(mem.entries(), oracle.as_slice());
    }

    #[test]
    fn out_of_order_append_rejected() {
        let mut mem = EpisodicMemory::new(3);
        mem.append(entry(2, click(1), Outcome::Advanced)).unwrap();
        let err = mem.append(entry(2, click(2), Outcome::Advanced)).unwrap_err();
        assert_eq!(err, MemoryError::OutOfOrderEntry { incoming: 2, last: 2 });
    }

    #[test]
    fn renders_empty_memory_token() {
        assert_eq!(EpisodicMemory::new(3).render_history(10), "(no prior actions)");
    }

    #[test]
    fn renders_single_entry_line() {
        let mut mem = EpisodicMemory::new(3);
        let mut e = entry(1, ActionCommand::Wait, Outcome::Advanced);
        e.delta_summary = "page loaded".into();
        mem.append(e).unwrap();
        assert_eq!(mem.render_history(10), "#1 wait() → advanced: page loaded");
    }

    #[test]
    fn render_truncates_to_last_entries() {
        let mut mem = EpisodicMemory::new(10);
        for i in 1..=5 {
            mem.append(entry(i, click(i as u32), Outcome::Advanced)).unwrap();
        }
        let text = mem.render_history(2);
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("#4 "));
        assert!(text.lines().nth(1).unwrap().starts_with("#5 "));
    }

    #[test]
    fn detects_alternating_click_back_loop() {
        let mut mem = EpisodicMemory::new(10);
        let fp_a = StateFingerprint(100);
        let fp_b = StateFingerprint(200);
        for i in 0..6u64 {
            let (action, fp) = if i % 2 == 0 { (click(10), fp_b) } else { (click(90), fp_a) };
            mem.append(entry_with_fingerprint(i + 1, action, Outcome::Stalled, fp)).unwrap();
        }
        assert!(mem.detect_loop(6, 3));
    }

    #[test]
    fn distinct_actions_do_not_trip_guard() {
        let mut mem = EpisodicMemory::new(10);
        for i in 1..=6 {
            mem.append(entry(i, click(i as u32 * 10), Outcome::Stalled)).unwrap();
        }
        assert!(!mem.detect_loop(6, 3));
    }

    #[test]
    fn repeats_below_threshold_do_not_trip_guard() {
        let mut mem = EpisodicMemory::new(10);
        mem.append(entry(1, click(10), Outcome::Stalled)).unwrap();
        mem.append(entry(2, click(10), Outcome::Stalled)).unwrap();
        assert!(!mem.detect_loop(6, 3));
    }

    #[test]
    fn repeats_outside_window_ignored() {
        let mut mem = EpisodicMemory::new(10);
        mem.append(entry(1, click(10), Outcome::Stalled)).unwrap();
        mem.append(entry(2, click(10), Outcome::Stalled)).unwrap();
        for i in 3..=8 {
            mem.append(entry(i, click(i as u32 * 10), Outcome::Stalled)).unwrap();
        }
        mem.append(entry(9, click(10), Outcome::Stalled)).unwrap();
        assert!(!mem.detect_loop(4, 3));
    }

    fn arb_outcome() -> impl Strategy<Value = Outcome> {
        prop_oneof![Just(Outcome::Advanced), Just(Outcome::Stalled), Just(Outcome::Regressed)]
    }

    proptest! {
        #[test]
        fn capacity_bound_holds(capacity in 1usize..8, outcomes in proptest::collection::vec(arb_outcome(), 0..40)) {
            let mut mem = EpisodicMemory::new(capacity);
            for (i, outcome) in outcomes.iter().enumerate() {
                mem.append(entry(i as u64 + 1, click(i as u32), *outcome)).unwrap();
                prop_assert!(mem.len() <= capacity);
            }
        }

        #[test]
        fn chronological_order_preserved(capacity in 1usize..8, outcomes in proptest::collection::vec(arb_outcome(), 0..40)) {
            let mut mem = EpisodicMemory::new(capacity);
            for (i, outcome) in outcomes.iter().enumerate() {
                mem.append(entry(i as u64 + 1, click(i as u32), *outcome)).unwrap();
            }
            let steps: Vec<u64> = mem.entries().iter().map(|e| e.step_index).collect();
            let mut sorted = steps.clone();
            sorted.sort_unstable();
            prop_assert_eq!(steps, sorted);
        }

        #[test]
        fn render_is_pure(outcomes in proptest::collection::vec(arb_outcome(), 0..20)) {
            let mut a = EpisodicMemory::new(6);
            let mut b = EpisodicMemory::new(6);
            for (i, outcome) in outcomes.iter().enumerate() {
                a.append(entry(i as u64 + 1, click(i as u32), *outcome)).unwrap();
                b.append(entry(i as u64 + 1, click(i as u32), *outcome)).unwrap();
            }
            prop_assert_eq!(a.render_history(10), b.render_history(10));
        }

        #[test]
        fn loop_detection_monotone_in_threshold(
            actions in proptest::collection::vec((0u32..4, 0u64..3), 2..20),
            window in 2usize..10,
        ) {
            let mut mem = EpisodicMemory::new(32);
            for (i, (x, fp)) in actions.iter().enumerate() {
                mem.append(entry_with_fingerprint(
                    i as u64 + 1,
                    click(*x),
                    Outcome::Stalled,
                    StateFingerprint(*fp),
                )).unwrap();
            }
            for k in (3..=window).rev() {
                if mem.detect_loop(window, k) {
                    for lower in 2..k {
                        prop_assert!(mem.detect_loop(window, lower));
                    }
                }
            }
        }
    }
}
