//! Headless-browser environment over the devtools wire protocol.
//!
//! Launches a local Chromium-family binary with remote debugging on an
//! ephemeral port, attaches to a fresh target over a WebSocket, and drives
//! it with synthetic input events. Observations stay vision-first: only
//! screenshots and the current URL ever leave this module.

use super::{action_points, validate_point, EnvError, EnvTiming, ExecutionOutcome, Screenshot, WebEnvironment};
use crate::grammar::{ActionCommand, Extent, Point, ScrollDirection};
use serde_json::{json, Value};
use std::collections::VecDeque;
use std::io::{BufRead, BufReader};
use std::net::TcpStream;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

/// Binary names probed on `PATH` when no explicit path is configured.
const CHROME_CANDIDATES: &[&str] = &[
    "google-chrome",
    "google-chrome-stable",
    "chromium",
    "chromium-browser",
    "chrome",
    "headless_shell",
];

/// Environment variable naming the browser binary, checked before `PATH`.
pub const CHROME_ENV_VAR: &str = "PIXELNAV_CHROME";

#[derive(Debug, Clone)]
pub struct ChromeOptions {
    /// Explicit browser binary; falls back to [`CHROME_ENV_VAR`] then `PATH`.
    pub binary: Option<PathBuf>,
    pub viewport: Extent,
    pub timing: EnvTiming,
    /// Additional command-line flags appended at launch.
    pub extra_args: Vec<String>,
}

impl Default for ChromeOptions {
    fn default() -> Self {
        ChromeOptions {
            binary: None,
            viewport: Extent::DEFAULT_VIEWPORT,
            timing: EnvTiming::default(),
            extra_args: Vec::new(),
        }
    }
}

/// Locates a usable browser binary.
pub fn find_browser_binary(options: &ChromeOptions) -> Option<PathBuf> {
    if let Some(path) = &options.binary {
        return path.exists().then(|| path.clone());
    }
    if let Ok(path) = std::env::var(CHROME_ENV_VAR) {
        let path = PathBuf::from(path);
        if path.exists() {
            return Some(path);
        }
    }
    let paths = std::env::var_os("PATH")?;
    for dir in std::env::split_paths(&paths) {
        for name in CHROME_CANDIDATES {
            let candidate = dir.join(name);
            if candidate.is_file() {
                return Some(candidate);
            }
        }
    }
    None
}

/// One attached headless-browser session.
pub struct CdpBrowser {
    child: Child,
    socket: WebSocket<MaybeTlsStream<TcpStream>>,
    session_id: String,
    next_id: u64,
    pending_events: VecDeque<Value>,
    viewport: Extent,
    timing: EnvTiming,
    user_data_dir: PathBuf,
    closed: bool,
}

impl CdpBrowser {
    /// Launches the browser, opens a fresh page target, and pins the
    /// viewport for the session lifetime.
    pub fn launch(options: ChromeOptions) -> Result<Self, EnvError> {
        let binary = find_browser_binary(&options)
            .ok_or_else(|| EnvError::LaunchFailure("no browser binary found".into()))?;

        let user_data_dir = std::env::temp_dir().join(format!(
            "pixelnav-chrome-{}-{:x}",
            std::process::id(),
            Instant::now().elapsed().as_nanos() as u64 ^ rand::random::<u64>()
        ));

        let mut cmd = Command::new(&binary);
        cmd.arg("--headless=new")
            .arg("--remote-debugging-port=0")
            .arg("--no-sandbox")
            .arg("--disable-gpu")
            .arg("--disable-dev-shm-usage")
            .arg("--no-first-run")
            .arg("--no-default-browser-check")
            .arg("--hide-scrollbars")
            .arg("--disable-extensions")
            .arg(format!("--user-data-dir={}", user_data_dir.display()))
            .arg(format!("--window-size={},{}", options.viewport.width, options.viewport.height))
            .args(&options.extra_args)
            .arg("about:blank")
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped());

        let mut child =
            cmd.spawn().map_err(|e| EnvError::LaunchFailure(format!("{}: {e}", binary.display())))?;

        let ws_url = match read_devtools_url(&mut child, Duration::from_secs(30)) {
            Ok(url) => url,
            Err(err) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(err);
            }
        };

        let (socket, _) = tungstenite::connect(&ws_url)
            .map_err(|e| EnvError::LaunchFailure(format!("websocket connect: {e}")))?;

        let mut browser = CdpBrowser {
            child,
            socket,
            session_id: String::new(),
            next_id: 0,
            pending_events: VecDeque::new(),
            viewport: options.viewport,
            timing: options.timing,
            user_data_dir,
            closed: false,
        };

        match browser.attach_new_target() {
            Ok(()) => Ok(browser),
            Err(err) => {
                browser.close();
                Err(err)
            }
        }
    }

    fn attach_new_target(&mut self) -> Result<(), EnvError> {
        let created = self.command_raw("Target.createTarget", json!({ "url": "about:blank" }), None)?;
        let target_id = created["targetId"]
            .as_str()
            .ok_or_else(|| EnvError::Protocol("createTarget returned no targetId".into()))?
            .to_string();
        let attached = self.command_raw(
            "Target.attachToTarget",
            json!({ "targetId": target_id, "flatten": true }),
            None,
        )?;
        self.session_id = attached["sessionId"]
            .as_str()
            .ok_or_else(|| EnvError::Protocol("attachToTarget returned no sessionId".into()))?
            .to_string();

        self.command("Page.enable", json!({}))?;
        self.command("Page.setLifecycleEventsEnabled", json!({ "enabled": true }))?;
        self.command(
            "Emulation.setDeviceMetricsOverride",
            json!({
                "width": self.viewport.width,
                "height": self.viewport.height,
                "deviceScaleFactor": 1,
                "mobile": false,
            }),
        )?;
        Ok(())
    }

    fn set_read_timeout(&mut self, timeout: Option<Duration>) {
        if let MaybeTlsStream::Plain(stream) = self.socket.get_mut() {
            let _ = stream.set_read_timeout(timeout);
        }
    }

    /// Sends a command in the page session and awaits its reply.
    fn command(&mut self, method: &str, params: Value) -> Result<Value, EnvError> {
        let session = self.session_id.clone();
        self.command_raw(method, params, Some(&session))
    }

    fn command_raw(
        &mut self,
        method: &str,
        params: Value,
        session_id: Option<&str>,
    ) -> Result<Value, EnvError> {
        if self.closed {
            return Err(EnvError::SessionClosed);
        }
        self.next_id += 1;
        let id = self.next_id;
        let mut message = json!({ "id": id, "method": method, "params": params });
        if let Some(session) = session_id {
            message["sessionId"] = json!(session);
        }
        self.socket
            .send(Message::Text(message.to_string()))
            .map_err(|e| EnvError::Protocol(format!("{method}: send: {e}")))?;

        self.set_read_timeout(Some(Duration::from_secs(30)));
        loop {
            let frame = self
                .socket
                .read()
                .map_err(|e| EnvError::Protocol(format!("{method}: read: {e}")))?;
            let Message::Text(text) = frame else { continue };
            let value: Value = match serde_json::from_str(&text) {
                Ok(v) => v,
                Err(_) => continue,
            };
            if value["id"].as_u64() == Some(id) {
                if let Some(error) = value.get("error") {
                    return Err(EnvError::Protocol(format!("{method}: {error}")));
                }
                return Ok(value["result"].clone());
            }
            if value.get("method").is_some() {
                self.pending_events.push_back(value);
            }
        }
    }

    /// Drains any queued protocol events without blocking.
    fn poll_events(&mut self, budget: Duration) {
        self.set_read_timeout(Some(budget.max(Duration::from_millis(1))));
        let deadline = Instant::now() + budget;
        loop {
            match self.socket.read() {
                Ok(Message::Text(text)) => {
                    if let Ok(value) = serde_json::from_str::<Value>(&text) {
                        if value.get("method").is_some() {
                            self.pending_events.push_back(value);
                        }
                    }
                }
                Ok(_) => {}
                Err(_) => break,
            }
            if Instant::now() >= deadline {
                break;
            }
        }
    }

    fn take_events(&mut self, method: &str) -> Vec<Value> {
        let mut taken = Vec::new();
        let mut keep = VecDeque::new();
        while let Some(event) = self.pending_events.pop_front() {
            if event["method"].as_str() == Some(method) {
                taken.push(event);
            } else {
                keep.push_back(event);
            }
        }
        self.pending_events = keep;
        taken
    }

    fn lifecycle_names(&mut self) -> Vec<String> {
        self.take_events("Page.lifecycleEvent")
            .into_iter()
            .filter_map(|e| e["params"]["name"].as_str().map(str::to_string))
            .collect()
    }

    /// Waits for the page to settle after an action: network idle, or a
    /// quiet period with no load activity, capped at the settle limit.
    fn wait_settle(&mut self) {
        const QUIET: Duration = Duration::from_millis(300);
        let start = Instant::now();
        let mut loading_seen = false;
        loop {
            self.poll_events(Duration::from_millis(50));
            let names = self.lifecycle_names();
            if !names.is_empty() {
                if names.iter().any(|n| n == "init" || n == "load") {
                    loading_seen = true;
                }
                if names.iter().any(|n| n == "networkIdle" || n == "networkAlmostIdle") {
                    return;
                }
            }
            let elapsed = start.elapsed();
            if elapsed >= self.timing.settle_cap {
                return;
            }
            if !loading_seen && elapsed >= QUIET {
                return;
            }
        }
    }

    fn current_url(&mut self) -> Result<String, EnvError> {
        let history = self.command("Page.getNavigationHistory", json!({}))?;
        let index = history["currentIndex"].as_u64().unwrap_or(0) as usize;
        Ok(history["entries"][index]["url"].as_str().unwrap_or("about:blank").to_string())
    }

    fn mouse_event(
        &mut self,
        kind: &str,
        x: u32,
        y: u32,
        button: &str,
        click_count: u32,
    ) -> Result<(), EnvError> {
        self.command(
            "Input.dispatchMouseEvent",
            json!({
                "type": kind,
                "x": x,
                "y": y,
                "button": button,
                "clickCount": click_count,
            }),
        )?;
        Ok(())
    }

    fn click_at(&mut self, point: Point, button: &str, click_count: u32) -> Result<(), EnvError> {
        self.mouse_event("mouseMoved", point.x, point.y, "none", 0)?;
        for count in 1..=click_count {
            self.mouse_event("mousePressed", point.x, point.y, button, count)?;
            self.mouse_event("mouseReleased", point.x, point.y, button, count)?;
        }
        Ok(())
    }

    fn drag(&mut self, start: Point, end: Point) -> Result<(), EnvError> {
        let steps = self.timing.drag_steps.max(1);
        let pause = self.timing.drag_duration / steps;
        self.mouse_event("mouseMoved", start.x, start.y, "none", 0)?;
        self.mouse_event("mousePressed", start.x, start.y, "left", 1)?;
        for i in 1..=steps {
            let x = start.x as i64 + (end.x as i64 - start.x as i64) * i as i64 / steps as i64;
            let y = start.y as i64 + (end.y as i64 - start.y as i64) * i as i64 / steps as i64;
            self.mouse_event("mouseMoved", x as u32, y as u32, "left", 0)?;
            std::thread::sleep(pause);
        }
        self.mouse_event("mouseReleased", end.x, end.y, "left", 1)?;
        Ok(())
    }

    fn key_event(&mut self, kind: &str, key: &KeySpec, modifiers: u32) -> Result<(), EnvError> {
        let mut params = json!({
            "type": kind,
            "key": key.key,
            "code": key.code,
            "modifiers": modifiers,
            "windowsVirtualKeyCode": key.vk,
            "nativeVirtualKeyCode": key.vk,
        });
        if kind == "keyDown" && !key.text.is_empty() && modifiers & !8 == 0 {
            params["text"] = json!(key.text);
        }
        self.command("Input.dispatchKeyEvent", params)?;
        Ok(())
    }

    fn hotkey(&mut self, keys: &[String]) -> Result<(), EnvError> {
        let mut modifiers = 0u32;
        let mut specs: Vec<KeySpec> = Vec::new();
        for key in keys {
            match modifier_bit(key) {
                Some(bit) => modifiers |= bit,
                None => specs.push(key_spec(key)),
            }
        }
        let modifier_specs: Vec<KeySpec> = keys
            .iter()
            .filter(|k| modifier_bit(k).is_some())
            .map(|k| key_spec(k))
            .collect();
        for spec in &modifier_specs {
            self.key_event("rawKeyDown", spec, modifiers)?;
        }
        for spec in &specs {
            self.key_event("keyDown", spec, modifiers)?;
            self.key_event("keyUp", spec, modifiers)?;
        }
        for spec in modifier_specs.iter().rev() {
            self.key_event("keyUp", spec, modifiers)?;
        }
        Ok(())
    }

    fn type_text(&mut self, content: &str) -> Result<(), EnvError> {
        let (text, submit) = match content.strip_suffix('\n') {
            Some(stripped) => (stripped, true),
            None => (content, false),
        };
        if !text.is_empty() {
            self.command("Input.insertText", json!({ "text": text }))?;
        }
        if submit {
            let enter = key_spec("enter");
            self.key_event("keyDown", &enter, 0)?;
            self.key_event("keyUp", &enter, 0)?;
        }
        Ok(())
    }

    fn scroll(&mut self, point: Point, direction: ScrollDirection) -> Result<(), EnvError> {
        let step_y = (self.viewport.height as f64 * self.timing.scroll_step_fraction) as i64;
        let step_x = (self.viewport.width as f64 * self.timing.scroll_step_fraction) as i64;
        let (dx, dy) = match direction {
            ScrollDirection::Down => (0, step_y),
            ScrollDirection::Up => (0, -step_y),
            ScrollDirection::Right => (step_x, 0),
            ScrollDirection::Left => (-step_x, 0),
        };
        self.command(
            "Input.dispatchMouseEvent",
            json!({
                "type": "mouseWheel",
                "x": point.x,
                "y": point.y,
                "deltaX": dx,
                "deltaY": dy,
            }),
        )?;
        Ok(())
    }
}

struct KeySpec {
    key: String,
    code: String,
    text: String,
    vk: u32,
}

fn modifier_bit(key: &str) -> Option<u32> {
    match key {
        "alt" => Some(1),
        "ctrl" | "control" => Some(2),
        "meta" | "cmd" | "command" => Some(4),
        "shift" => Some(8),
        _ => None,
    }
}

fn key_spec(key: &str) -> KeySpec {
    let (name, code, text, vk): (&str, String, &str, u32) = match key {
        "enter" | "return" => ("Enter", "Enter".into(), "\r", 13),
        "tab" => ("Tab", "Tab".into(), "\t", 9),
        "esc" | "escape" => ("Escape", "Escape".into(), "", 27),
        "space" => (" ", "Space".into(), " ", 32),
        "backspace" => ("Backspace", "Backspace".into(), "", 8),
        "delete" | "del" => ("Delete", "Delete".into(), "", 46),
        "up" | "arrowup" => ("ArrowUp", "ArrowUp".into(), "", 38),
        "down" | "arrowdown" => ("ArrowDown", "ArrowDown".into(), "", 40),
        "left" | "arrowleft" => ("ArrowLeft", "ArrowLeft".into(), "", 37),
        "right" | "arrowright" => ("ArrowRight", "ArrowRight".into(), "", 39),
        "home" => ("Home", "Home".into(), "", 36),
        "end" => ("End", "End".into(), "", 35),
        "pageup" => ("PageUp", "PageUp".into(), "", 33),
        "pagedown" => ("PageDown", "PageDown".into(), "", 34),
        "alt" => ("Alt", "AltLeft".into(), "", 18),
        "ctrl" | "control" => ("Control", "ControlLeft".into(), "", 17),
        "shift" => ("Shift", "ShiftLeft".into(), "", 16),
        "meta" | "cmd" | "command" => ("Meta", "MetaLeft".into(), "", 91),
        single if single.chars().count() == 1 => {
            let c = single.chars().next().unwrap();
            if c.is_ascii_alphabetic() {
                let upper = c.to_ascii_uppercase();
                return KeySpec {
                    key: c.to_string(),
                    code: format!("Key{upper}"),
                    text: c.to_string(),
                    vk: upper as u32,
                };
            }
            if c.is_ascii_digit() {
                return KeySpec {
                    key: c.to_string(),
                    code: format!("Digit{c}"),
                    text: c.to_string(),
                    vk: c as u32,
                };
            }
            return KeySpec { key: c.to_string(), code: String::new(), text: c.to_string(), vk: 0 };
        }
        other => {
            // Unrecognized named key: pass it through capitalized.
            let mut chars = other.chars();
            let name = match chars.next() {
                Some(first) => first.to_ascii_uppercase().to_string() + chars.as_str(),
                None => String::new(),
            };
            return KeySpec { key: name, code: String::new(), text: String::new(), vk: 0 };
        }
    };
    KeySpec { key: name.to_string(), code, text: text.to_string(), vk }
}

/// Reads the "DevTools listening on ws://..." line from the child's stderr.
fn read_devtools_url(child: &mut Child, timeout: Duration) -> Result<String, EnvError> {
    let stderr = child
        .stderr
        .take()
        .ok_or_else(|| EnvError::LaunchFailure("no stderr from browser process".into()))?;
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let reader = BufReader::new(stderr);
        for line in reader.lines().map_while(Result::ok) {
            if let Some(pos) = line.find("ws://") {
                let _ = tx.send(line[pos..].trim().to_string());
                break;
            }
        }
    });
    rx.recv_timeout(timeout)
        .map_err(|_| EnvError::LaunchFailure("timed out waiting for DevTools endpoint".into()))
}

impl WebEnvironment for CdpBrowser {
    fn viewport(&self) -> Extent {
        self.viewport
    }

    fn screenshot(&mut self) -> Result<Screenshot, EnvError> {
        if self.closed {
            return Err(EnvError::SessionClosed);
        }
        let url = self.current_url()?;
        let result = self.command(
            "Page.captureScreenshot",
            json!({
                "format": "png",
                "clip": {
                    "x": 0,
                    "y": 0,
                    "width": self.viewport.width,
                    "height": self.viewport.height,
                    "scale": 1,
                },
            }),
        )?;
        let data = result["data"]
            .as_str()
            .ok_or_else(|| EnvError::Capture("captureScreenshot returned no data".into()))?;
        let bytes = {
            use base64::Engine;
            base64::engine::general_purpose::STANDARD
                .decode(data)
                .map_err(|e| EnvError::Capture(format!("bad base64: {e}")))?
        };
        Ok(Screenshot::new(bytes, self.viewport.width, self.viewport.height, url))
    }

    fn execute(&mut self, action: &ActionCommand) -> Result<ExecutionOutcome, EnvError> {
        if self.closed {
            return Err(EnvError::SessionClosed);
        }
        for point in action_points(action) {
            validate_point(point, self.viewport)?;
        }
        match action {
            ActionCommand::Click { point } => self.click_at(*point, "left", 1)?,
            ActionCommand::DoubleClick { point } => self.click_at(*point, "left", 2)?,
            ActionCommand::RightClick { point } => self.click_at(*point, "right", 1)?,
            ActionCommand::Drag { start, end } => self.drag(*start, *end)?,
            ActionCommand::Hotkey { keys } => self.hotkey(keys)?,
            ActionCommand::Type { content } => self.type_text(content)?,
            ActionCommand::Scroll { point, direction } => self.scroll(*point, *direction)?,
            ActionCommand::Wait => {
                std::thread::sleep(self.timing.wait_action);
                return Ok(ExecutionOutcome::Ok);
            }
            ActionCommand::Finished { .. } => return Ok(ExecutionOutcome::Ok),
        }
        self.wait_settle();
        Ok(ExecutionOutcome::Ok)
    }

    fn navigate(&mut self, url: &str) -> Result<ExecutionOutcome, EnvError> {
        if self.closed {
            return Err(EnvError::SessionClosed);
        }
        let result = self.command("Page.navigate", json!({ "url": url }))?;
        if let Some(error_text) = result["errorText"].as_str() {
            if !error_text.is_empty() {
                return Ok(ExecutionOutcome::Failed { detail: error_text.to_string() });
            }
        }
        self.wait_settle();
        Ok(ExecutionOutcome::Ok)
    }

    fn back(&mut self) -> Result<ExecutionOutcome, EnvError> {
        if self.closed {
            return Err(EnvError::SessionClosed);
        }
        let history = self.command("Page.getNavigationHistory", json!({}))?;
        let index = history["currentIndex"].as_u64().unwrap_or(0);
        if index == 0 {
            return Ok(ExecutionOutcome::NoEffect);
        }
        let entry_id = history["entries"][(index - 1) as usize]["id"]
            .as_u64()
            .ok_or_else(|| EnvError::Protocol("history entry without id".into()))?;
        self.command("Page.navigateToHistoryEntry", json!({ "entryId": entry_id }))?;
        self.wait_settle();
        Ok(ExecutionOutcome::Ok)
    }

    fn close(&mut self) {
        if self.closed {
            return;
        }
        self.closed = true;
        let _ = self.socket.send(Message::Text(
            json!({ "id": u64::MAX, "method": "Browser.close", "params": {} }).to_string(),
        ));
        std::thread::sleep(Duration::from_millis(100));
        let _ = self.child.kill();
        let _ = self.child.wait();
        let _ = std::fs::remove_dir_all(&self.user_data_dir);
    }
}

impl Drop for CdpBrowser {
    fn drop(&mut self) {
        self.close();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_specs_cover_letters_digits_and_named_keys() {
        let a = key_spec("a");
        assert_eq!((a.key.as_str(), a.code.as_str(), a.vk), ("a", "KeyA", 65));
        let five = key_spec("5");
        assert_eq!((five.key.as_str(), five.code.as_str()), ("5", "Digit5"));
        let enter = key_spec("enter");
        assert_eq!((enter.key.as_str(), enter.vk), ("Enter", 13));
        let odd = key_spec("f1ish");
        assert_eq!(odd.key, "F1ish");
    }

    #[test]
    fn modifier_bits_match_protocol_mask() {
        assert_eq!(modifier_bit("alt"), Some(1));
        assert_eq!(modifier_bit("ctrl"), Some(2));
        assert_eq!(modifier_bit("meta"), Some(4));
        assert_eq!(modifier_bit("shift"), Some(8));
        assert_eq!(modifier_bit("a"), None);
    }

    #[test]
    fn missing_binary_is_launch_failure() {
        let options = ChromeOptions {
            binary: Some(PathBuf::from("/nonexistent/browser-binary")),
            ..ChromeOptions::default()
        };
        assert!(matches!(
            CdpBrowser::launch(options).unwrap_err(),
            EnvError::LaunchFailure(_)
        ));
    }
}
