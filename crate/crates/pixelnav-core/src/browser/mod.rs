//! Browser environments behind one interface: a devtools-driven headless
//! browser and a deterministic simulated environment for tests and
//! benchmarks.
//!
//! Only pixels and the current URL cross this boundary. There is no DOM
//! reading, no accessibility tree, and no HTML parsing anywhere behind it.

pub mod cdp;
mod raster;
pub mod sim;

pub use sim::{PageGraph, SimulatedEnv};

use crate::gateway::ImageAttachment;
use crate::grammar::{ActionCommand, CoordSpace, Extent, Point};
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::time::{Duration, SystemTime, UNIX_EPOCH};
use thiserror::Error;

/// A lossless capture of the visible viewport.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Screenshot {
    /// PNG-encoded raster.
    pub encoded_bytes: Vec<u8>,
    pub width: u32,
    pub height: u32,
    /// Capture time, milliseconds since the Unix epoch.
    pub captured_at_ms: u64,
    /// URL of the page at capture time.
    pub url: String,
}

impl Screenshot {
    pub fn new(encoded_bytes: Vec<u8>, width: u32, height: u32, url: impl Into<String>) -> Self {
        let captured_at_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Screenshot { encoded_bytes, width, height, captured_at_ms, url: url.into() }
    }

    /// Base64 attachment for a model request.
    pub fn attachment(&self) -> ImageAttachment {
        ImageAttachment::png(base64::engine::general_purpose::STANDARD.encode(&self.encoded_bytes))
    }

    /// 64-bit average-hash of the decoded image. Near-identical renders land
    /// in the same bucket, which is all loop fingerprinting needs.
    pub fn perceptual_hash(&self) -> u64 {
        match image::load_from_memory(&self.encoded_bytes) {
            Ok(img) => raster::average_hash(&img.to_rgb8()),
            Err(_) => 0,
        }
    }
}

/// Result of executing one action. Failures that the agent should observe
/// visually (a navigation error page, a dead click) are reported here, not
/// raised as errors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ExecutionOutcome {
    Ok,
    NoEffect,
    Failed { detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("session is closed")]
    SessionClosed,
    #[error("point ({x}, {y}) lies outside the {width}x{height} viewport")]
    PointOutOfViewport { x: u32, y: u32, width: u32, height: u32 },
    #[error("model-space point passed to the browser layer")]
    ModelSpacePoint,
    #[error("failed to launch browser: {0}")]
    LaunchFailure(String),
    #[error("bad page graph: {0}")]
    BadPageGraph(String),
    #[error("devtools protocol error: {0}")]
    Protocol(String),
    #[error("screenshot capture failed: {0}")]
    Capture(String),
}

/// Pacing knobs shared by environment implementations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvTiming {
    /// Sleep performed by the `wait` action.
    pub wait_action: Duration,
    /// Cap on waiting for the page to settle after an action.
    pub settle_cap: Duration,
    /// Total duration of an interpolated drag.
    pub drag_duration: Duration,
    /// Number of interpolated move events in a drag.
    pub drag_steps: u32,
    /// Scroll step as a fraction of the viewport dimension.
    pub scroll_step_fraction: f64,
}

impl Default for EnvTiming {
    fn default() -> Self {
        EnvTiming {
            wait_action: Duration::from_secs(5),
            settle_cap: Duration::from_secs(10),
            drag_duration: Duration::from_millis(300),
            drag_steps: 10,
            scroll_step_fraction: 0.75,
        }
    }
}

/// One browser session (real or simulated). A handle belongs to exactly one
/// task session; run concurrent sessions on separate handles.
pub trait WebEnvironment: Send {
    fn viewport(&self) -> Extent;

    /// Captures the visible viewport only (no full-page scroll capture).
    fn screenshot(&mut self) -> Result<Screenshot, EnvError>;

    /// Executes one pixel-space action. Points must already be scaled into
    /// the viewport. `Finished` is a no-op at this layer.
    fn execute(&mut self, action: &ActionCommand) -> Result<ExecutionOutcome, EnvError>;

    /// Loads a URL. Navigation failures are reported in the outcome so the
    /// verifier can observe the failed state.
    fn navigate(&mut self, url: &str) -> Result<ExecutionOutcome, EnvError>;

    /// Pops one entry off the session history, if any.
    fn back(&mut self) -> Result<ExecutionOutcome, EnvError>;

    fn close(&mut self);
}

/// Checks the pixel-space precondition shared by all environments.
pub(crate) fn validate_point(p: Point, viewport: Extent) -> Result<(), EnvError> {
    if p.space != CoordSpace::Pixel {
        return Err(EnvError::ModelSpacePoint);
    }
    if p.x >= viewport.width || p.y >= viewport.height {
        return Err(EnvError::PointOutOfViewport {
            x: p.x,
            y: p.y,
            width: viewport.width,
            height: viewport.height,
        });
    }
    Ok(())
}

/// Points an action touches, in dispatch order.
pub(crate) fn action_points(action: &ActionCommand) -> Vec<Point> {
    match action {
        ActionCommand::Click { point }
        | ActionCommand::DoubleClick { point }
        | ActionCommand::RightClick { point }
        | ActionCommand::Scroll { point, .. } => vec![*point],
        ActionCommand::Drag { start, end } => vec![*start, *end],
        _ => Vec::new(),
    }
}
