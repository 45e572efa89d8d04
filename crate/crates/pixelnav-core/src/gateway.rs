//! Uniform client interface to external text and vision model services.
//!
//! Every agent role speaks through this boundary. The wire format is
//! OpenAI-style chat completions (messages array, base64 image parts), which
//! both hosted frontier models and local VLM servers expose. Backends are
//! stateless after construction and safely shareable across concurrent task
//! sessions; retry state is per-call.

use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::VecDeque;
use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageRole {
    User,
    Assistant,
}

/// An encoded screenshot ready for attachment to a user message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageAttachment {
    pub media_type: String,
    pub base64_data: String,
}

impl ImageAttachment {
    pub fn png(base64_data: String) -> Self {
        ImageAttachment { media_type: "image/png".into(), base64_data }
    }

    fn data_url(&self) -> String {
        format!("data:{};base64,{}", self.media_type, self.base64_data)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: MessageRole,
    pub text: String,
    pub images: Vec<ImageAttachment>,
}

impl ChatMessage {
    pub fn user(text: impl Into<String>) -> Self {
        ChatMessage { role: MessageRole::User, text: text.into(), images: Vec::new() }
    }

    pub fn user_with_images(text: impl Into<String>, images: Vec<ImageAttachment>) -> Self {
        ChatMessage { role: MessageRole::User, text: text.into(), images }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        ChatMessage { role: MessageRole::Assistant, text: text.into(), images: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: Option<String>,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub model_name: String,
}

impl ChatRequest {
    /// Messages must be nonempty and images may only ride on user messages.
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("messages must be nonempty".into()));
        }
        for msg in &self.messages {
            if msg.role == MessageRole::Assistant && !msg.images.is_empty() {
                return Err(GatewayError::InvalidRequest(
                    "images may only be attached to user messages".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    /// Wall-clock milliseconds around the transport call only, so latency
    /// figures are comparable across backends regardless of local parsing.
    pub latency_ms: u64,
    pub token_usage: Option<TokenUsage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("transport failure: {0}")]
    TransportError(String),
    #[error("backend refused request: {0}")]
    BackendRefused(String),
    #[error("backend returned an empty response")]
    EmptyResponse,
    #[error("scripted backend ran out of canned replies")]
    ScriptExhausted,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// A model service endpoint. Implementations must be shareable across
/// threads; calls are independent request/response exchanges.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

/// Retry policy for transient transport failures (connection errors and 5xx
/// responses). Auth and quota refusals are never retried.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub backoff_factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 2,
            initial_backoff: Duration::from_millis(250),
            backoff_factor: 2.0,
        }
    }
}

impl RetryPolicy {
    fn backoff_for(&self, attempt: u32) -> Duration {
        let millis =
            self.initial_backoff.as_millis() as f64 * self.backoff_factor.powi(attempt as i32);
        Duration::from_millis(millis as u64)
    }
}

/// HTTP backend speaking the chat-completions wire format.
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend").field("endpoint", &self.endpoint).finish()
    }
}

impl HttpBackend {
    pub fn new(
        endpoint: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
        retry: RetryPolicy,
    ) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::TransportError(e.to_string()))?;
        Ok(HttpBackend { endpoint: endpoint.into(), api_key, retry, client })
    }
}

/// Request body in chat-completions form. Prompt text is carried through
/// byte-for-byte; user messages without images stay plain strings for
/// maximum server compatibility.
pub(crate) fn chat_completions_body(request: &ChatRequest) -> serde_json::Value {
    let mut messages = Vec::new();
    if let Some(system) = &request.system_prompt {
        messages.push(json!({ "role": "system", "content": system }));
    }
    for msg in &request.messages {
        let role = match msg.role {
            MessageRole::User => "user",
            MessageRole::Assistant => "assistant",
        };
        if msg.images.is_empty() {
            messages.push(json!({ "role": role, "content": msg.text }));
        } else {
            let mut parts = vec![json!({ "type": "text", "text": msg.text })];
            for image in &msg.images {
                parts.push(json!({
                    "type": "image_url",
                    "image_url": { "url": image.data_url() }
                }));
            }
            messages.push(json!({ "role": role, "content": parts }));
        }
    }
    json!({
        "model": request.model_name,
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
        "messages": messages,
    })
}

#[derive(Deserialize)]
struct CompletionsReply {
    choices: Vec<CompletionsChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct CompletionsChoice {
    message: CompletionsMessage,
}

#[derive(Deserialize)]
struct CompletionsMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
    #[serde(default)]
    total_tokens: u64,
}

impl Backend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let body = chat_completions_body(request);

        let mut attempt = 0u32;
        loop {
            let mut builder = self.client.post(&self.endpoint).json(&body);
            if let Some(key) = &self.api_key {
                builder = builder.bearer_auth(key);
            }

            let started = Instant::now();
            let outcome = builder.send().and_then(|resp| {
                let status = resp.status();
                resp.text().map(|text| (status, text))
            });
            let latency_ms = started.elapsed().as_millis() as u64;

            let (status, text) = match outcome {
                Ok(pair) => pair,
                Err(err) => {
                    if attempt < self.retry.max_retries {
                        std::thread::sleep(self.retry.backoff_for(attempt));
                        attempt += 1;
                        continue;
                    }
                    return Err(GatewayError::TransportError(err.to_string()));
                }
            };

            if matches!(status.as_u16(), 401 | 403 | 429) {
                return Err(GatewayError::BackendRefused(format!("HTTP {status}")));
            }
            if !status.is_success() {
                if status.is_server_error() && attempt < self.retry.max_retries {
                    std::thread::sleep(self.retry.backoff_for(attempt));
                    attempt += 1;
                    continue;
                }
                return Err(GatewayError::TransportError(format!("HTTP {status}")));
            }

            let reply: CompletionsReply = serde_json::from_str(&text)
                .map_err(|e| GatewayError::TransportError(format!("bad response body: {e}")))?;
            let content =
                reply.choices.first().and_then(|c| c.message.content.clone()).unwrap_or_default();
            if content.is_empty() {
                return Err(GatewayError::EmptyResponse);
            }
            let token_usage = reply.usage.map(|u| TokenUsage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
                total_tokens: u.total_tokens,
            });
            return Ok(ChatResponse { text: content, latency_ms, token_usage });
        }
    }
}

/// Deterministic backend that replays canned replies in order and records
/// every request it receives. The test oracle for everything above the
/// transport layer.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    replies: Mutex<VecDeque<String>>,
    received: Mutex<Vec<ChatRequest>>,
}

impl ScriptedBackend {
    pub fn new<I, S>(script: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedBackend {
            replies: Mutex::new(script.into_iter().map(Into::into).collect()),
            received: Mutex::new(Vec::new()),
        }
    }

    /// Requests seen so far, in call order.
    pub fn received(&self) -> Vec<ChatRequest> {
        self.received.lock().unwrap().clone()
    }

    pub fn remaining(&self) -> usize {
        self.replies.lock().unwrap().len()
    }
}

/// Builds a shareable scripted backend; the nth `complete` call returns the
/// nth canned reply with latency 0.
pub fn scripted_backend<I, S>(script: I) -> Arc<ScriptedBackend>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    Arc::new(ScriptedBackend::new(script))
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        self.received.lock().unwrap().push(request.clone());
        let reply = self.replies.lock().unwrap().pop_front();
        match reply {
            Some(text) => Ok(ChatResponse { text, latency_ms: 0, token_usage: None }),
            None => Err(GatewayError::ScriptExhausted),
        }
    }
}

/// The agent roles that can be routed to distinct backends, mirroring a
/// deployment where planning/reasoning run on a general LLM and grounding on
/// a specialized vision model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Planner,
    Reasoner,
    Grounder,
    Verifier,
    Judge,
}

impl AgentRole {
    pub const ALL: [AgentRole; 5] = [
        AgentRole::Planner,
        AgentRole::Reasoner,
        AgentRole::Grounder,
        AgentRole::Verifier,
        AgentRole::Judge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Planner => "planner",
            AgentRole::Reasoner => "reasoner",
            AgentRole::Grounder => "grounder",
            AgentRole::Verifier => "verifier",
            AgentRole::Judge => "judge",
        }
    }
}

/// One role's backend plus its request parameters. Temperature defaults to 0
/// for every role; determinism dominates creativity throughout this system.
#[derive(Clone)]
pub struct RoleBackend {
    pub backend: Arc<dyn Backend>,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl fmt::Debug for RoleBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RoleBackend").field("model_name", &self.model_name).finish()
    }
}

impl RoleBackend {
    pub fn new(backend: Arc<dyn Backend>, model_name: impl Into<String>) -> Self {
        RoleBackend {
            backend,
            model_name: model_name.into(),
            temperature: 0.0,
            max_output_tokens: 2048,
        }
    }

    pub fn complete(
        &self,
        system_prompt: Option<&str>,
        messages: Vec<ChatMessage>,
    ) -> Result<ChatResponse, GatewayError> {
        let request = ChatRequest {
            system_prompt: system_prompt.map(str::to_string),
            messages,
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            model_name: self.model_name.clone(),
        };
        self.backend.complete(&request)
    }
}

/// Per-role backend routing for one engine instance.
#[derive(Debug, Clone)]
pub struct RoleBackends {
    pub planner: RoleBackend,
    pub reasoner: RoleBackend,
    pub grounder: RoleBackend,
    pub verifier: RoleBackend,
    pub judge: Option<RoleBackend>,
}

impl RoleBackends {
    /// Routes every role to the same backend. Handy for tests and smoke runs.
    pub fn uniform(backend: Arc<dyn Backend>, model_name: &str) -> Self {
        let role = RoleBackend::new(backend, model_name);
        RoleBackends {
            planner: role.clone(),
            reasoner: role.clone(),
            grounder: role.clone(),
            verifier: role.clone(),
            judge: Some(role),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request_with(messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            system_prompt: None,
            messages,
            temperature: 0.0,
            max_output_tokens: 64,
            model_name: "test".into(),
        }
    }

    #[test]
    fn scripted_backend_replays_in_order() {
        let backend = scripted_backend(["a", "b"]);
        let req = request_with(vec![ChatMessage::user("hi")]);
        assert_eq!(backend.complete(&req).unwrap().text, "a");
        assert_eq!(backend.complete(&req).unwrap().text, "b");
    }

    #[test]
    fn scripted_backend_exhaustion_is_error() {
        let backend = scripted_backend(["a"]);
        let req = request_with(vec![ChatMessage::user("hi")]);
        backend.complete(&req).unwrap();
        assert_eq!(backend.complete(&req).unwrap_err(), GatewayError::ScriptExhausted);
    }

    #[test]
    fn scripted_backend_has_zero_latency() {
        let backend = scripted_backend(["ok"]);
        let req = request_with(vec![ChatMessage::user("echo")]);
        let resp = backend.complete(&req).unwrap();
        assert_eq!(resp.text, "ok");
        assert_eq!(resp.latency_ms, 0);
    }

    #[test]
    fn scripted_backend_captures_requests_verbatim() {
        let backend = scripted_backend(["ok"]);
        let prompt = "bytes in\u{00a0}equal bytes out\n";
        let image = ImageAttachment::png("aGk=".into());
        let req = request_with(vec![ChatMessage::user_with_images(prompt, vec![image.clone()])]);
        backend.complete(&req).unwrap();

        let seen = backend.received();
        assert_eq!(seen.len(), 1);
        assert_eq!(seen[0].messages[0].text, prompt);
        assert_eq!(seen[0].messages[0].images, vec![image]);
    }

    #[test]
    fn empty_message_list_rejected() {
        let backend = scripted_backend(["ok"]);
        let req = request_with(vec![]);
        assert!(matches!(backend.complete(&req).unwrap_err(), GatewayError::InvalidRequest(_)));
    }

    #[test]
    fn assistant_images_rejected() {
        let mut msg = ChatMessage::assistant("no");
        msg.images.push(ImageAttachment::png("aGk=".into()));
        let req = request_with(vec![ChatMessage::user("hi"), msg]);
        assert!(req.validate().is_err());
    }

    #[test]
    fn body_carries_system_and_image_parts() {
        let req = ChatRequest {
            system_prompt: Some("sys".into()),
            messages: vec![
                ChatMessage::user_with_images("look", vec![ImageAttachment::png("aGk=".into())]),
                ChatMessage::assistant("prior"),
            ],
            temperature: 0.0,
            max_output_tokens: 16,
            model_name: "m".into(),
        };
        let body = chat_completions_body(&req);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][0]["content"], "sys");
        assert_eq!(body["messages"][1]["content"][0]["text"], "look");
        assert_eq!(
            body["messages"][1]["content"][1]["image_url"]["url"],
            "data:image/png;base64,aGk="
        );
        assert_eq!(body["messages"][2]["content"], "prior");
    }

    #[test]
    fn plain_user_message_stays_string() {
        let req = request_with(vec![ChatMessage::user("plain")]);
        let body = chat_completions_body(&req);
        assert_eq!(body["messages"][0]["content"], "plain");
    }
}
