//! Endpoint adapters. Each speaks to one kind of serving stack; all of them
//! start from the common chat-completion message layout.

use super::endpoint::ModelEndpoint;
use crate::promptkit::PromptBundle;
use crate::registry::Registry;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Timeout,
    Network,
    Auth,
    RateLimit,
    /// The endpoint refused the requested sampling temperature.
    TemperatureRejected,
    Rejection,
    Server,
    Malformed,
}

impl ErrorClass {
    /// Worth retrying with the same request.
    pub fn is_transient(self) -> bool {
        matches!(
            self,
            Self::Timeout | Self::Network | Self::RateLimit | Self::Server
        )
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(Value::as_str).unwrap_or("unknown"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{class}: {message}")]
pub struct CallError {
    pub class: ErrorClass,
    pub message: String,
}

impl CallError {
    pub fn new(class: ErrorClass, message: impl Into<String>) -> Self {
        Self {
            class,
            message: message.into(),
        }
    }
}

/// Chat-completion request body: system prompt, exemplar turns as prior
/// user/assistant pairs (text only), then the study turn with text and the
/// PNG as a data URL.
pub fn chat_completion_body(ep: &ModelEndpoint, bundle: &PromptBundle, temperature: f64) -> Value {
    let mut messages = vec![json!({"role": "system", "content": bundle.system_text})];
    for ex in &bundle.exemplars {
        messages.push(json!({"role": "user", "content": bundle.base_text}));
        messages.push(json!({"role": "assistant", "content": ex}));
    }
    messages.push(json!({
        "role": "user",
        "content": [
            {"type": "text", "text": bundle.user_text},
            {"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{}", bundle.image_png_base64)}},
        ],
    }));
    json!({
        "model": ep.wire_model(),
        "messages": messages,
        "temperature": temperature,
        "max_tokens": ep.max_new_tokens,
        "n": 1,
        "stream": false,
    })
}

pub trait ChatAdapter: Send + Sync {
    fn build_request(&self, ep: &ModelEndpoint, bundle: &PromptBundle, temperature: f64) -> Value {
        chat_completion_body(ep, bundle, temperature)
    }

    /// Sends one request and returns the generated text verbatim.
    fn send(&self, ep: &ModelEndpoint, body: &Value) -> Result<String, CallError>;
}

/// Extracts `choices[0].message.content`, joining text parts when the
/// content is a part list.
pub fn parse_chat_response(body: &str) -> Result<String, CallError> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| CallError::new(ErrorClass::Malformed, format!("response is not JSON: {e}")))?;
    let content = v.pointer("/choices/0/message/content").ok_or_else(|| {
        CallError::new(
            ErrorClass::Malformed,
            "response has no choices[0].message.content",
        )
    })?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        _ => Err(CallError::new(
            ErrorClass::Malformed,
            "message content is neither text nor parts",
        )),
    }
}

/// Maps a non-success HTTP status to an error class.
pub fn classify_http(status: u16, body: &str) -> ErrorClass {
    match status {
        401 | 403 => ErrorClass::Auth,
        429 => ErrorClass::RateLimit,
        408 | 504 => ErrorClass::Timeout,
        400 | 422 if body.to_ascii_lowercase().contains("temperature") => {
            ErrorClass::TemperatureRejected
        }
        400..=499 => ErrorClass::Rejection,
        _ => ErrorClass::Server,
    }
}

/// POSTs to `{base_url}/chat/completions`.
#[derive(Debug, Default, Clone, Copy)]
pub struct OpenAiChatAdapter;

impl ChatAdapter for OpenAiChatAdapter {
    fn send(&self, ep: &ModelEndpoint, body: &Value) -> Result<String, CallError> {
        let url = format!("{}/chat/completions", ep.base_url.trim_end_matches('/'));
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(ep.request_timeout_s.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(&url);
        if let Some(var) = &ep.auth_env_var {
            let token = std::env::var(var).map_err(|_| {
                CallError::new(
                    ErrorClass::Auth,
                    format!("environment variable {var} is not set"),
                )
            })?;
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => CallError::new(ErrorClass::Timeout, e.to_string()),
            ureq::Error::Io(ref io) if io.kind() == std::io::ErrorKind::TimedOut => {
                CallError::new(ErrorClass::Timeout, e.to_string())
            }
            other => CallError::new(ErrorClass::Network, other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| CallError::new(ErrorClass::Malformed, e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(CallError::new(
                classify_http(status, &text),
                format!("HTTP {status}: {text}"),
            ));
        }
        parse_chat_response(&text)
    }
}

/// Offline stand-in: writes a short findings paragraph naming the
/// abnormalities listed in the fixation lines of the study turn.
#[derive(Debug, Default, Clone, Copy)]
pub struct MockEchoAdapter;

const FIXATION_PREFIX: &str = "Fixation Data: [Abnormality bounding box: ";

impl ChatAdapter for MockEchoAdapter {
    fn send(&self, _ep: &ModelEndpoint, body: &Value) -> Result<String, CallError> {
        let messages = body
            .get("messages")
            .and_then(Value::as_array)
            .ok_or_else(|| CallError::new(ErrorClass::Rejection, "request has no messages"))?;
        let study_text = messages
            .last()
            .and_then(|m| m.pointer("/content/0/text"))
            .and_then(Value::as_str)
            .unwrap_or_default();
        let labels: Vec<&str> = study_text
            .lines()
            .filter_map(|l| l.strip_prefix(FIXATION_PREFIX))
            .filter_map(|rest| rest.split(", Fixation Time:").next())
            .collect();
        let n_exemplars = messages
            .iter()
            .filter(|m| m.get("role").and_then(Value::as_str) == Some("assistant"))
            .count();

        let mut out = String::from("Findings: ");
        if labels.is_empty() {
            out.push_str("The lungs are clear. No acute cardiopulmonary process.");
        } else {
            let found: Vec<String> = labels
                .iter()
                .map(|l| format!("There is {} noted.", l.to_lowercase()))
                .collect();
            out.push_str(&found.join(" "));
            out.push_str(" No pneumothorax.");
        }
        if n_exemplars > 0 {
            out.push_str(" Heart size is normal. No pleural effusion.");
        }
        Ok(out)
    }
}

pub type AdapterRegistry = Registry<dyn ChatAdapter>;

/// Registry with `openai-chat` and `mock-echo`.
pub fn builtin_adapters() -> AdapterRegistry {
    let mut reg: AdapterRegistry = Registry::new("endpoint adapter");
    reg.register("openai-chat", Arc::new(OpenAiChatAdapter));
    reg.register("mock-echo", Arc::new(MockEchoAdapter));
    reg
}
