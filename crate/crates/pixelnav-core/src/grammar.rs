//! Parser and serializer for the model-facing action language.
//!
//! The grounding model replies with a `Thought: ... / Action: ...` envelope
//! carrying exactly one `name(arg='value', ...)` expression. Points travel
//! as `<point>x y</point>` in model coordinates and are scaled to viewport
//! pixels before anything touches the browser. Parsing is total: any input
//! maps to a typed command or a typed error, never a panic.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Coordinate space a [`Point`] is expressed in.
///
/// Model space is the grid the vision model emits (0..=1000 by default);
/// pixel space is the live viewport. Only pixel-space points may be handed
/// to a browser session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordSpace {
    Model,
    Pixel,
}

/// A non-negative screen coordinate tagged with its space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: u32,
    pub y: u32,
    pub space: CoordSpace,
}

impl Point {
    pub fn model(x: u32, y: u32) -> Self {
        Point { x, y, space: CoordSpace::Model }
    }

    pub fn pixel(x: u32, y: u32) -> Self {
        Point { x, y, space: CoordSpace::Pixel }
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Width and height of a coordinate space, in its own units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extent {
    pub width: u32,
    pub height: u32,
}

impl Extent {
    pub const fn new(width: u32, height: u32) -> Self {
        Extent { width, height }
    }

    /// Default extent of the model coordinate grid. Configurable because the
    /// convention is inherited from whichever grounding model is plugged in.
    pub const DEFAULT_MODEL_SPACE: Extent = Extent::new(1000, 1000);

    /// Default browser viewport.
    pub const DEFAULT_VIEWPORT: Extent = Extent::new(1280, 800);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScrollDirection {
    Up,
    Down,
    Left,
    Right,
}

impl ScrollDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            ScrollDirection::Up => "up",
            ScrollDirection::Down => "down",
            ScrollDirection::Left => "left",
            ScrollDirection::Right => "right",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "up" => Some(ScrollDirection::Up),
            "down" => Some(ScrollDirection::Down),
            "left" => Some(ScrollDirection::Left),
            "right" => Some(ScrollDirection::Right),
            _ => None,
        }
    }
}

/// One typed action from the closed grammar.
///
/// Wire names differ from the variant names where the prompt's vocabulary is
/// non-semantic: `left_double` parses to [`ActionCommand::DoubleClick`] and
/// `right_single` to [`ActionCommand::RightClick`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionCommand {
    Click { point: Point },
    DoubleClick { point: Point },
    RightClick { point: Point },
    Drag { start: Point, end: Point },
    Hotkey { keys: Vec<String> },
    Type { content: String },
    Scroll { point: Point, direction: ScrollDirection },
    Wait,
    Finished { content: String },
}

impl ActionCommand {
    /// Wire name of this action.
    pub fn name(&self) -> &'static str {
        match self {
            ActionCommand::Click { .. } => "click",
            ActionCommand::DoubleClick { .. } => "left_double",
            ActionCommand::RightClick { .. } => "right_single",
            ActionCommand::Drag { .. } => "drag",
            ActionCommand::Hotkey { .. } => "hotkey",
            ActionCommand::Type { .. } => "type",
            ActionCommand::Scroll { .. } => "scroll",
            ActionCommand::Wait => "wait",
            ActionCommand::Finished { .. } => "finished",
        }
    }

    /// True for the click family (single, double, right), all of which
    /// dispatch a pointer press at one point.
    pub fn is_click(&self) -> bool {
        matches!(
            self,
            ActionCommand::Click { .. }
                | ActionCommand::DoubleClick { .. }
                | ActionCommand::RightClick { .. }
        )
    }

    /// Primary point of the action, if it has one.
    pub fn point(&self) -> Option<Point> {
        match self {
            ActionCommand::Click { point }
            | ActionCommand::DoubleClick { point }
            | ActionCommand::RightClick { point }
            | ActionCommand::Scroll { point, .. } => Some(*point),
            ActionCommand::Drag { start, .. } => Some(*start),
            _ => None,
        }
    }

    /// Rewrites every point through [`scale_point`], producing a pixel-space
    /// command ready for the browser layer.
    pub fn to_pixel_space(
        &self,
        model_extent: Extent,
        viewport: Extent,
    ) -> Result<ActionCommand, GrammarError> {
        let mut out = self.clone();
        match &mut out {
            ActionCommand::Click { point }
            | ActionCommand::DoubleClick { point }
            | ActionCommand::RightClick { point }
            | ActionCommand::Scroll { point, .. } => {
                *point = scale_point(*point, model_extent, viewport)?;
            }
            ActionCommand::Drag { start, end } => {
                *start = scale_point(*start, model_extent, viewport)?;
                *end = scale_point(*end, model_extent, viewport)?;
            }
            _ => {}
        }
        Ok(out)
    }
}

/// A fully parsed model reply: free-form thought plus one typed action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelTurn {
    pub thought: String,
    pub action: ActionCommand,
    /// Verbatim model output the turn was parsed from.
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GrammarError {
    #[error("no Action line found in model output")]
    MalformedOutput,
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("bad arguments for `{action}`: {detail}")]
    BadArguments { action: String, detail: String },
    #[error("hotkey uses more than 3 keys")]
    TooManyHotkeys,
    #[error("bad scroll direction `{0}`")]
    BadDirection(String),
    #[error("extent dimensions must be positive")]
    NonPositiveExtent,
}

fn bad_args(action: &str, detail: impl Into<String>) -> GrammarError {
    GrammarError::BadArguments { action: action.to_string(), detail: detail.into() }
}

/// Escapes content for embedding in a single-quoted argument value.
pub fn escape_content(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            '\'' => out.push_str("\\'"),
            '"' => out.push_str("\\\""),
            _ => out.push(c),
        }
    }
    out
}

/// Inverse of [`escape_content`]. Unknown escape sequences are kept verbatim
/// so the function is total over arbitrary input.
pub fn unescape_content(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('t') => out.push('\t'),
            Some('\'') => out.push('\''),
            Some('"') => out.push('"'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

/// Raw `key='value'` pairs with values still in escaped form.
type RawArgs = Vec<(String, String)>;

/// Parses `name(args...)` at the start of `text`. Returns the action name,
/// raw argument pairs, and the unconsumed remainder after the closing paren.
fn parse_expression(text: &str) -> Result<(String, RawArgs, &str), GrammarError> {
    let text = text.trim_start();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;

    while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
        i += 1;
    }
    if i == 0 {
        return Err(bad_args("", "expected `name(...)` expression"));
    }
    let name: String = chars[..i].iter().collect();

    while i < chars.len() && chars[i].is_whitespace() {
        i += 1;
    }
    if i >= chars.len() || chars[i] != '(' {
        return Err(bad_args(&name, "expected `(` after action name"));
    }
    i += 1;

    let mut args = RawArgs::new();
    loop {
        while i < chars.len() && chars[i].is_whitespace() {
            i += 1;
        }
        if i >= chars.len() {
            return Err(bad_args(&name, "unterminated argument list"));
        }
        if chars[i] == ')' {
            i += 1;
            break;
        }
        if !args.is_empty() {
            if chars[i] != ',' {
                return Err(bad_args(&name, "expected `,` between arguments"));
            }
            i += 1;
            while i < chars.len() && chars[i].is_whitespace() {
                i += 1;
            }
        }

        let key_start = i;
        while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
            i += 1;
        }
        if i == key_start {
            return Err(bad_args(&name, "expected argument name"));
        }
        let key: String = chars[key_start..i].iter().collect();

        while i < chars.len() && chars[i].is_whitespace() {
            i += 1;
        }
        if i >= chars.len() || chars[i] != '=' {
            return Err(bad_args(&name, format!("expected `=` after `{key}`")));
        }
        i += 1;
        while i < chars.len() && chars[i].is_whitespace() {
            i += 1;
        }

        // Single quotes are canonical; double quotes accepted on input.
        if i >= chars.len() || (chars[i] != '\'' && chars[i] != '"') {
            return Err(bad_args(&name, format!("expected quoted value for `{key}`")));
        }
        let quote = chars[i];
        i += 1;
        let mut value = String::new();
        loop {
            if i >= chars.len() {
                return Err(bad_args(&name, format!("unterminated string for `{key}`")));
            }
            let c = chars[i];
            if c == '\\' {
                value.push('\\');
                i += 1;
                if i < chars.len() {
                    value.push(chars[i]);
                    i += 1;
                }
            } else if c == quote {
                i += 1;
                break;
            } else {
                value.push(c);
                i += 1;
            }
        }
        args.push((key, value));
    }

    let consumed: usize = chars[..i].iter().map(|c| c.len_utf8()).sum();
    Ok((name, args, &text[consumed..]))
}

fn parse_point(action: &str, key: &str, raw: &str) -> Result<Point, GrammarError> {
    let inner = raw
        .trim()
        .strip_prefix("<point>")
        .and_then(|s| s.strip_suffix("</point>"))
        .ok_or_else(|| bad_args(action, format!("`{key}` must be `<point>x y</point>`")))?;
    let mut parts = inner.split_whitespace();
    let (Some(xs), Some(ys), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(bad_args(action, format!("`{key}` must hold exactly two coordinates")));
    };
    let x: u32 = xs.parse().map_err(|_| {
        bad_args(action, format!("`{key}` x coordinate `{xs}` is not a non-negative integer"))
    })?;
    let y: u32 = ys.parse().map_err(|_| {
        bad_args(action, format!("`{key}` y coordinate `{ys}` is not a non-negative integer"))
    })?;
    Ok(Point::model(x, y))
}

fn check_arg_names(action: &str, args: &RawArgs, allowed: &[&str]) -> Result<(), GrammarError> {
    for (key, _) in args {
        if !allowed.contains(&key.as_str()) {
            return Err(bad_args(action, format!("unknown argument `{key}`")));
        }
    }
    for name in allowed {
        if args.iter().filter(|(k, _)| k == name).count() > 1 {
            return Err(bad_args(action, format!("duplicate argument `{name}`")));
        }
    }
    Ok(())
}

fn get_arg<'a>(args: &'a RawArgs, key: &str) -> Option<&'a str> {
    args.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

fn require_arg<'a>(action: &str, args: &'a RawArgs, key: &str) -> Result<&'a str, GrammarError> {
    get_arg(args, key).ok_or_else(|| bad_args(action, format!("missing argument `{key}`")))
}

fn build_action(name: &str, args: RawArgs) -> Result<ActionCommand, GrammarError> {
    match name {
        "click" | "left_double" | "right_single" => {
            check_arg_names(name, &args, &["point"])?;
            let point = parse_point(name, "point", require_arg(name, &args, "point")?)?;
            Ok(match name {
                "click" => ActionCommand::Click { point },
                "left_double" => ActionCommand::DoubleClick { point },
                _ => ActionCommand::RightClick { point },
            })
        }
        "drag" => {
            check_arg_names(name, &args, &["start_point", "end_point"])?;
            let start = parse_point(name, "start_point", require_arg(name, &args, "start_point")?)?;
            let end = parse_point(name, "end_point", require_arg(name, &args, "end_point")?)?;
            Ok(ActionCommand::Drag { start, end })
        }
        "hotkey" => {
            check_arg_names(name, &args, &["key"])?;
            let raw = require_arg(name, &args, "key")?;
            let keys: Vec<String> = raw.split(' ').map(|k| k.to_ascii_lowercase()).collect();
            if keys.iter().any(|k| k.is_empty()) {
                return Err(bad_args(name, "empty key in hotkey"));
            }
            if keys.len() > 3 {
                return Err(GrammarError::TooManyHotkeys);
            }
            Ok(ActionCommand::Hotkey { keys })
        }
        "type" => {
            check_arg_names(name, &args, &["content"])?;
            let content = unescape_content(require_arg(name, &args, "content")?);
            Ok(ActionCommand::Type { content })
        }
        "scroll" => {
            check_arg_names(name, &args, &["point", "direction"])?;
            let point = parse_point(name, "point", require_arg(name, &args, "point")?)?;
            let raw_dir = require_arg(name, &args, "direction")?;
            let direction = ScrollDirection::parse(raw_dir.trim())
                .ok_or_else(|| GrammarError::BadDirection(raw_dir.to_string()))?;
            Ok(ActionCommand::Scroll { point, direction })
        }
        "wait" => {
            check_arg_names(name, &args, &[])?;
            Ok(ActionCommand::Wait)
        }
        "finished" => {
            check_arg_names(name, &args, &["content"])?;
            let content = get_arg(&args, "content").map(unescape_content).unwrap_or_default();
            Ok(ActionCommand::Finished { content })
        }
        other => Err(GrammarError::UnknownAction(other.to_string())),
    }
}

/// Parses a single `name(arg=..., ...)` action expression.
pub fn parse_action(text: &str) -> Result<ActionCommand, GrammarError> {
    let (name, args, rest) = parse_expression(text)?;
    if !rest.trim().is_empty() {
        return Err(bad_args(&name, "trailing characters after action expression"));
    }
    build_action(&name, args)
}

fn strip_code_fences(text: &str) -> String {
    text.lines()
        .filter(|line| !line.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Parses a raw model reply into a [`ModelTurn`].
///
/// Lenient about the envelope: markdown code fences and surrounding
/// whitespace are tolerated, the thought may be absent, and anything after
/// the action expression is ignored. The first `Action:` marker that carries
/// a well-formed expression wins.
pub fn parse_model_output(text: &str) -> Result<ModelTurn, GrammarError> {
    const ACTION_MARKER: &str = "Action:";
    const THOUGHT_MARKER: &str = "Thought:";

    let cleaned = strip_code_fences(text);
    let mut first_error: Option<GrammarError> = None;
    let mut search_from = 0;

    while let Some(offset) = cleaned[search_from..].find(ACTION_MARKER) {
        let marker_pos = search_from + offset;
        let expr_start = marker_pos + ACTION_MARKER.len();
        let parsed = parse_expression(&cleaned[expr_start..])
            .and_then(|(name, args, _)| build_action(&name, args));
        match parsed {
            Ok(action) => {
                let head = &cleaned[..marker_pos];
                let thought = match head.rfind(THOUGHT_MARKER) {
                    Some(pos) => head[pos + THOUGHT_MARKER.len()..].trim().to_string(),
                    None => String::new(),
                };
                return Ok(ModelTurn { thought, action, raw: text.to_string() });
            }
            Err(err) => {
                first_error.get_or_insert(err);
                search_from = expr_start;
            }
        }
    }

    Err(first_error.unwrap_or(GrammarError::MalformedOutput))
}

/// Canonical text form of an action; [`parse_action`] maps it back to an
/// equal command. This is the byte-exact form used in trajectory logs.
pub fn serialize_action(action: &ActionCommand) -> String {
    fn point_str(p: &Point) -> String {
        format!("<point>{} {}</point>", p.x, p.y)
    }

    match action {
        ActionCommand::Click { point } => format!("click(point='{}')", point_str(point)),
        ActionCommand::DoubleClick { point } => {
            format!("left_double(point='{}')", point_str(point))
        }
        ActionCommand::RightClick { point } => {
            format!("right_single(point='{}')", point_str(point))
        }
        ActionCommand::Drag { start, end } => format!(
            "drag(start_point='{}', end_point='{}')",
            point_str(start),
            point_str(end)
        ),
        ActionCommand::Hotkey { keys } => format!("hotkey(key='{}')", keys.join(" ")),
        ActionCommand::Type { content } => format!("type(content='{}')", escape_content(content)),
        ActionCommand::Scroll { point, direction } => format!(
            "scroll(point='{}', direction='{}')",
            point_str(point),
            direction.as_str()
        ),
        ActionCommand::Wait => "wait()".to_string(),
        ActionCommand::Finished { content } => {
            format!("finished(content='{}')", escape_content(content))
        }
    }
}

/// Maps a model-space point onto the viewport, rounding half up and clamping
/// into `[0, viewport - 1]` on each axis.
pub fn scale_point(p: Point, model_extent: Extent, viewport: Extent) -> Result<Point, GrammarError> {
    if model_extent.width == 0
        || model_extent.height == 0
        || viewport.width == 0
        || viewport.height == 0
    {
        return Err(GrammarError::NonPositiveExtent);
    }
    Ok(Point {
        x: scale_axis(p.x, model_extent.width, viewport.width),
        y: scale_axis(p.y, model_extent.height, viewport.height),
        space: CoordSpace::Pixel,
    })
}

fn scale_axis(v: u32, from: u32, to: u32) -> u32 {
    // round(v * to / from) in exact integer arithmetic, half away from zero.
    let scaled = (2 * v as u128 * to as u128 + from as u128) / (2 * from as u128);
    scaled.min(to as u128 - 1) as u32
}
