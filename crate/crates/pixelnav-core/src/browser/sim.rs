//! Deterministic simulated web environment.
//!
//! A declarative page graph — pages, clickable hotspot rectangles, text
//! fields, and transitions — backs a state machine that renders procedural
//! screenshots. Identical action sequences from the same start state yield
//! identical page sequences and identical screenshot bytes, which is what
//! benchmark fixtures and the agent-loop tests rely on.
//!
//! Graph files are JSON (see `docs/page_graph.md`); the schema is versioned
//! and stable because benchmark fixtures depend on it.

use super::raster;
use super::{action_points, validate_point, EnvError, ExecutionOutcome, Screenshot, WebEnvironment};
use crate::grammar::{ActionCommand, Extent, ScrollDirection};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

/// Pseudo page id: a hotspot targeting it pops the history stack instead of
/// pushing a new page, like an in-page back button.
pub const BACK_TARGET: &str = "__back";

/// Current page-graph schema version.
pub const PAGE_GRAPH_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Rect { x, y, w, h }
    }

    pub fn contains(&self, px: u32, py: u32) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    /// Center of the rect, in the same pixel space.
    pub fn center(&self) -> (u32, u32) {
        (self.x + self.w / 2, self.y + self.h / 2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hotspot {
    pub rect: Rect,
    pub label: String,
    /// Page id to transition to, or [`BACK_TARGET`].
    pub next_page: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextField {
    pub rect: Rect,
    pub name: String,
    /// Page to transition to when input is submitted with a trailing newline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submit_next_page: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageSpec {
    /// URL reported for this page; defaults to `sim://<page_id>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<[u8; 3]>,
    /// Content height in pixels; pages taller than the viewport can scroll.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default)]
    pub hotspots: Vec<Hotspot>,
    #[serde(default)]
    pub text_fields: Vec<TextField>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageGraph {
    pub schema_version: u32,
    pub start_page: String,
    pub pages: BTreeMap<String, PageSpec>,
}

impl PageGraph {
    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        serde_json::from_str(text).map_err(|e| EnvError::BadPageGraph(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path).map_err(|e| EnvError::BadPageGraph(e.to_string()))?;
        Self::from_json(&text)
    }

    /// Checks referential integrity and that every rect lies within the
    /// viewport horizontally and within the page content vertically.
    pub fn validate(&self, viewport: Extent) -> Result<(), EnvError> {
        if self.schema_version != PAGE_GRAPH_SCHEMA_VERSION {
            return Err(EnvError::BadPageGraph(format!(
                "unsupported schema version {}",
                self.schema_version
            )));
        }
        if !self.pages.contains_key(&self.start_page) {
            return Err(EnvError::BadPageGraph(format!(
                "start page `{}` not in graph",
                self.start_page
            )));
        }
        for (id, page) in &self.pages {
            let content_height = page.height.unwrap_or(viewport.height).max(viewport.height);
            let check_rect = |rect: &Rect, what: &str| -> Result<(), EnvError> {
                if rect.w == 0 || rect.h == 0 {
                    return Err(EnvError::BadPageGraph(format!("{what} on `{id}` has zero area")));
                }
                if rect.x + rect.w > viewport.width || rect.y + rect.h > content_height {
                    return Err(EnvError::BadPageGraph(format!(
                        "{what} on `{id}` lies outside the page area"
                    )));
                }
                Ok(())
            };
            for hotspot in &page.hotspots {
                check_rect(&hotspot.rect, &format!("hotspot `{}`", hotspot.label))?;
                if hotspot.next_page != BACK_TARGET && !self.pages.contains_key(&hotspot.next_page) {
                    return Err(EnvError::BadPageGraph(format!(
                        "hotspot `{}` on `{id}` points to missing page `{}`",
                        hotspot.label, hotspot.next_page
                    )));
                }
            }
            for field in &page.text_fields {
                check_rect(&field.rect, &format!("text field `{}`", field.name))?;
                if let Some(target) = &field.submit_next_page {
                    if !self.pages.contains_key(target) {
                        return Err(EnvError::BadPageGraph(format!(
                            "text field `{}` on `{id}` submits to missing page `{target}`",
                            field.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn page_url(&self, id: &str) -> String {
        self.pages
            .get(id)
            .and_then(|p| p.url.clone())
            .unwrap_or_else(|| format!("sim://{id}"))
    }

    /// Resolves a navigation target: a page id, a `sim://` URL, or a page's
    /// declared URL.
    fn resolve(&self, target: &str) -> Option<String> {
        if self.pages.contains_key(target) {
            return Some(target.to_string());
        }
        if let Some(id) = target.strip_prefix("sim://") {
            if self.pages.contains_key(id) {
                return Some(id.to_string());
            }
        }
        self.pages
            .iter()
            .find(|(_, p)| p.url.as_deref() == Some(target))
            .map(|(id, _)| id.clone())
    }
}

/// Deterministic state machine implementing [`WebEnvironment`].
#[derive(Debug)]
pub struct SimulatedEnv {
    graph: PageGraph,
    viewport: Extent,
    current: String,
    history: Vec<String>,
    scroll_x: u32,
    scroll_y: u32,
    focused_field: Option<usize>,
    field_text: BTreeMap<(String, String), String>,
    wait_duration: Duration,
    scroll_step_fraction: f64,
    closed: bool,
}

impl SimulatedEnv {
    /// Opens a session at the graph's start page. The `wait` action does not
    /// sleep by default; the state machine has no asynchronous content.
    pub fn open(graph: PageGraph, viewport: Extent) -> Result<Self, EnvError> {
        graph.validate(viewport)?;
        let current = graph.start_page.clone();
        Ok(SimulatedEnv {
            graph,
            viewport,
            current,
            history: Vec::new(),
            scroll_x: 0,
            scroll_y: 0,
            focused_field: None,
            field_text: BTreeMap::new(),
            wait_duration: Duration::ZERO,
            scroll_step_fraction: 0.75,
            closed: false,
        })
    }

    pub fn with_wait_duration(mut self, duration: Duration) -> Self {
        self.wait_duration = duration;
        self
    }

    pub fn current_page(&self) -> &str {
        &self.current
    }

    pub fn history_depth(&self) -> usize {
        self.history.len()
    }

    /// Text typed into a field so far, if any.
    pub fn field_contents(&self, page: &str, field: &str) -> Option<&str> {
        self.field_text.get(&(page.to_string(), field.to_string())).map(String::as_str)
    }

    fn page(&self) -> &PageSpec {
        &self.graph.pages[&self.current]
    }

    fn content_height(&self) -> u32 {
        self.page().height.unwrap_or(self.viewport.height).max(self.viewport.height)
    }

    fn ensure_open(&self) -> Result<(), EnvError> {
        if self.closed {
            Err(EnvError::SessionClosed)
        } else {
            Ok(())
        }
    }

    fn goto(&mut self, page_id: String) {
        self.history.push(self.current.clone());
        self.current = page_id;
        self.scroll_x = 0;
        self.scroll_y = 0;
        self.focused_field = None;
    }

    fn pop_history(&mut self) -> ExecutionOutcome {
        match self.history.pop() {
            Some(prev) => {
                self.current = prev;
                self.scroll_x = 0;
                self.scroll_y = 0;
                self.focused_field = None;
                ExecutionOutcome::Ok
            }
            None => ExecutionOutcome::NoEffect,
        }
    }

    /// Follows a hotspot target: either a transition or a history pop.
    fn follow(&mut self, target: &str) -> ExecutionOutcome {
        if target == BACK_TARGET {
            self.pop_history()
        } else {
            self.goto(target.to_string());
            ExecutionOutcome::Ok
        }
    }

    fn hit_click(&mut self, screen_x: u32, screen_y: u32) -> ExecutionOutcome {
        // Hit-testing happens in page coordinates: screen + scroll offset.
        let px = screen_x + self.scroll_x;
        let py = screen_y + self.scroll_y;
        let page = self.page().clone();
        if let Some(hotspot) = page.hotspots.iter().find(|h| h.rect.contains(px, py)) {
            return self.follow(&hotspot.next_page.clone());
        }
        if let Some(idx) = page.text_fields.iter().position(|f| f.rect.contains(px, py)) {
            self.focused_field = Some(idx);
            return ExecutionOutcome::Ok;
        }
        self.focused_field = None;
        ExecutionOutcome::NoEffect
    }

    fn type_text(&mut self, content: &str) -> ExecutionOutcome {
        let Some(idx) = self.focused_field else {
            return ExecutionOutcome::NoEffect;
        };
        let field = self.page().text_fields[idx].clone();
        let (text, submit) = match content.strip_suffix('\n') {
            Some(stripped) => (stripped, true),
            None => (content, false),
        };
        let key = (self.current.clone(), field.name.clone());
        self.field_text.entry(key).or_default().push_str(text);
        if submit {
            if let Some(target) = &field.submit_next_page {
                self.goto(target.clone());
            }
        }
        ExecutionOutcome::Ok
    }

    fn scroll(&mut self, direction: ScrollDirection) -> ExecutionOutcome {
        let step_y = (self.viewport.height as f64 * self.scroll_step_fraction) as u32;
        let max_y = self.content_height() - self.viewport.height;
        match direction {
            ScrollDirection::Down => self.scroll_y = (self.scroll_y + step_y).min(max_y),
            ScrollDirection::Up => self.scroll_y = self.scroll_y.saturating_sub(step_y),
            // Page content is viewport-wide, so horizontal offset stays 0.
            ScrollDirection::Right | ScrollDirection::Left => {}
        }
        ExecutionOutcome::Ok
    }

    fn render(&self) -> Vec<u8> {
        let page = self.page();
        let background = page.background.unwrap_or(raster::PAGE_BACKGROUND);
        let mut canvas = raster::new_canvas(self.viewport, background);
        let dx = -(self.scroll_x as i64);
        let dy = -(self.scroll_y as i64);
        for hotspot in &page.hotspots {
            raster::draw_hotspot(
                &mut canvas,
                hotspot.rect.x as i64 + dx,
                hotspot.rect.y as i64 + dy,
                hotspot.rect.w,
                hotspot.rect.h,
                &hotspot.label,
            );
        }
        for (idx, field) in page.text_fields.iter().enumerate() {
            let text = self
                .field_contents(&self.current, &field.name)
                .unwrap_or("")
                .to_string();
            raster::draw_text_field(
                &mut canvas,
                field.rect.x as i64 + dx,
                field.rect.y as i64 + dy,
                field.rect.w,
                field.rect.h,
                &text,
                self.focused_field == Some(idx),
            );
        }
        raster::draw_page_marker(&mut canvas, &self.current);
        raster::encode_png(&canvas)
    }
}

impl WebEnvironment for SimulatedEnv {
    fn viewport(&self) -> Extent {
        self.viewport
    }

    fn screenshot(&mut self) -> Result<Screenshot, EnvError> {
        self.ensure_open()?;
        let bytes = self.render();
        Ok(Screenshot::new(
            bytes,
            self.viewport.width,
            self.viewport.height,
            self.graph.page_url(&self.current),
        ))
    }

    fn execute(&mut self, action: &ActionCommand) -> Result<ExecutionOutcome, EnvError> {
        self.ensure_open()?;
        for point in action_points(action) {
            validate_point(point, self.viewport)?;
        }
        let outcome = match action {
            ActionCommand::Click { point } | ActionCommand::DoubleClick { point } => {
                self.hit_click(point.x, point.y)
            }
            // No context menus or drag targets exist in the state machine.
            ActionCommand::RightClick { .. } => ExecutionOutcome::NoEffect,
            ActionCommand::Drag { .. } => ExecutionOutcome::NoEffect,
            ActionCommand::Hotkey { keys } => {
                let chord: Vec<&str> = keys.iter().map(String::as_str).collect();
                match chord.as_slice() {
                    ["alt", "left"] | ["alt", "arrowleft"] => self.pop_history(),
                    _ => ExecutionOutcome::NoEffect,
                }
            }
            ActionCommand::Type { content } => self.type_text(content),
            ActionCommand::Scroll { direction, .. } => self.scroll(*direction),
            ActionCommand::Wait => {
                if !self.wait_duration.is_zero() {
                    std::thread::sleep(self.wait_duration);
                }
                ExecutionOutcome::Ok
            }
            ActionCommand::Finished { .. } => ExecutionOutcome::Ok,
        };
        Ok(outcome)
    }

    fn navigate(&mut self, url: &str) -> Result<ExecutionOutcome, EnvError> {
        self.ensure_open()?;
        match self.graph.resolve(url) {
            Some(page_id) => {
                self.goto(page_id);
                Ok(ExecutionOutcome::Ok)
            }
            None => Ok(ExecutionOutcome::Failed {
                detail: format!("navigation failed: no page for `{url}`"),
            }),
        }
    }

    fn back(&mut self) -> Result<ExecutionOutcome, EnvError> {
        self.ensure_open()?;
        Ok(self.pop_history())
    }

    fn close(&mut self) {
        self.closed = true;
    }
}
