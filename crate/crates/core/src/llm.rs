//! Chat-completion backends shared by LLM extraction and generation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum LlmError {
    /// Worth retrying: timeouts, connection resets, 429/5xx.
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("backend failure: {0}")]
    Fatal(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_tokens: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest<'a> {
    /// Caller-assigned id; mocks key their canned answers on it.
    pub request_id: &'a str,
    pub prompt: &'a str,
    pub decode: DecodeParams,
    /// 0 for the first try.
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<ChatResponse, LlmError>;
}

/// Whitespace token count, used as the token proxy for offline backends.
pub fn approx_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Body of a reply that may be wrapped in a markdown code fence.
pub fn strip_code_fence(raw: &str) -> &str {
    let body = raw.trim();
    match body.strip_prefix("```") {
        Some(rest) => {
            let rest = rest.trim_start_matches(|c: char| c.is_ascii_alphabetic());
            rest.strip_suffix("```").unwrap_or(rest).trim()
        }
        None => body,
    }
}

/// Offline backend answering with a caller-supplied function of the request.
pub struct ScriptedLlm<F> {
    script: F,
}

impl<F> ScriptedLlm<F>
where
    F: Fn(&ChatRequest<'_>) -> Result<String, LlmError> + Send + Sync,
{
    pub fn new(script: F) -> Self {
        Self { script }
    }
}

impl<F> LlmBackend for ScriptedLlm<F>
where
    F: Fn(&ChatRequest<'_>) -> Result<String, LlmError> + Send + Sync,
{
    fn complete(&self, request: &ChatRequest<'_>) -> Result<ChatResponse, LlmError> {
        let text = (self.script)(request)?;
        Ok(ChatResponse {
            input_tokens: approx_tokens(request.prompt),
            output_tokens: approx_tokens(&text),
            text,
        })
    }
}

#[cfg(feature = "remote")]
pub use remote::RemoteChat;

#[cfg(feature = "remote")]
mod remote {
    use std::time::Duration;

    use serde_json::json;

    use super::{ChatRequest, ChatResponse, LlmBackend, LlmError};

    /// OpenAI-compatible `/chat/completions` client.
    pub struct RemoteChat {
        endpoint: String,
        api_key: Option<String>,
        model: String,
        agent: ureq::Agent,
    }

    impl RemoteChat {
        pub const ENDPOINT_VAR: &'static str = "PATHSYNTH_LLM_ENDPOINT";
        pub const KEY_VAR: &'static str = "PATHSYNTH_LLM_API_KEY";
        pub const MODEL_VAR: &'static str = "PATHSYNTH_LLM_MODEL";

        pub fn new(endpoint: &str, api_key: Option<String>, model: &str, timeout: Duration) -> Self {
            let agent = ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .http_status_as_error(false)
                .build()
                .into();
            Self {
                endpoint: endpoint.trim_end_matches('/').to_string(),
                api_key,
                model: model.to_string(),
                agent,
            }
        }

        pub fn from_env(timeout: Duration) -> Result<Self, LlmError> {
            let endpoint = std::env::var(Self::ENDPOINT_VAR)
                .map_err(|_| LlmError::Fatal(format!("{} is not set", Self::ENDPOINT_VAR)))?;
            let model = std::env::var(Self::MODEL_VAR).unwrap_or_else(|_| "gpt-4o-mini".into());
            Ok(Self::new(&endpoint, std::env::var(Self::KEY_VAR).ok(), &model, timeout))
        }
    }

    impl LlmBackend for RemoteChat {
        fn complete(&self, request: &ChatRequest<'_>) -> Result<ChatResponse, LlmError> {
            let mut req = self.agent.post(format!("{}/chat/completions", self.endpoint));
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            let body = json!({
                "model": self.model,
                "messages": [{ "role": "user", "content": request.prompt }],
                "temperature": request.decode.temperature,
                "max_tokens": request.decode.max_tokens,
            });
            let mut resp = req
                .send_json(body)
                .map_err(|e| LlmError::Transient(e.to_string()))?;
            let status = resp.status().as_u16();
            if status == 429 || status >= 500 {
                return Err(LlmError::Transient(format!("HTTP {status}")));
            }
            if status >= 400 {
                return Err(LlmError::Fatal(format!("HTTP {status}")));
            }
            let value: serde_json::Value = resp
                .body_mut()
                .read_json()
                .map_err(|e| LlmError::Transient(format!("unreadable body: {e}")))?;
            let text = value["choices"][0]["message"]["content"]
                .as_str()
                .ok_or_else(|| LlmError::Fatal("response lacks choices[0].message.content".into()))?
                .to_string();
            Ok(ChatResponse {
                input_tokens: value["usage"]["prompt_tokens"]
                    .as_u64()
                    .unwrap_or_else(|| super::approx_tokens(request.prompt)),
                output_tokens: value["usage"]["completion_tokens"]
                    .as_u64()
                    .unwrap_or_else(|| super::approx_tokens(&text)),
                text,
            })
        }
    }
}
