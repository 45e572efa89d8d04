//! Vision-first web agent engine.
//!
//! The engine drives a browser purely through screenshots and typed point
//! actions: a planner decomposes the task, a reasoner picks the next step, a
//! visual grounder turns the step into a coordinate action, and a verifier
//! judges progress from before/after screenshots. An episodic memory buffer
//! conditions each turn and feeds a loop guard. Benchmark harnesses score
//! click grounding accuracy and end-to-end task success, and a data pipeline
//! turns UI annotation datasets into grounding training records.

pub mod agents;
pub mod augment;
pub mod bench;
pub mod browser;
pub mod gateway;
pub mod grammar;
pub mod memory;
pub mod orchestrator;
pub mod trajectory;
