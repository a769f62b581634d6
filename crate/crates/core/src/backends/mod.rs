//! Chat backends: HTTP clients for two wire protocols, a deterministic
//! replay backend for offline runs, and text-mode tool-call extraction.

mod extract;
mod fixture;
mod http;
mod replay;
mod wire;

pub use extract::{extract_text_calls, TextExtraction};
pub use fixture::{record_fixture, record_reference_fixtures, REFERENCE_FIXTURES};
pub use http::HttpBackend;
pub use replay::{
    match_key_for, replay_match_key, ReplayBackend, ReplayEntry, ReplayKey, ReplayScript,
};
pub use wire::{build_request_body, parse_response_body, render_tool_docs};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{ChatMessage, ToolCall, ToolDefinition, UsageRecord};

#[derive(Debug, Error)]
pub enum BackendError {
    /// Network-level failure; the only retryable class.
    #[error("transport: {0}")]
    Transport(String),
    /// The backend answered but the body did not follow the protocol.
    #[error("protocol: {0}")]
    Protocol(String),
    /// Rejected credentials. Never retried.
    #[error("auth: {0}")]
    Auth(String),
    #[error("replay script: {0}")]
    Script(String),
    #[error("backend config: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// `POST {endpoint}/v1/chat/completions`.
    OpenaiCompat,
    /// `POST {endpoint}/api/chat`.
    Ollama,
    /// Scripted responses from a file; no network.
    Replay,
}

/// How tool schemas reach the model: the protocol's native tools field, or
/// rendered into the prompt with calls extracted from the reply text.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolMode {
    #[default]
    Native,
    Text,
}

fn default_timeout() -> u64 {
    120
}

fn default_retries() -> u32 {
    2
}

fn default_backoff() -> u64 {
    1000
}

/// Backend connection settings, loadable from TOML.
///
/// The API key itself never appears here: `api_key_env` names an environment
/// variable that is read at connect time and never logged.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub tool_mode: ToolMode,
    #[serde(default = "default_timeout")]
    pub request_timeout_secs: u64,
    /// Extra attempts after the first, transport failures only.
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// First retry delay; doubles per attempt.
    #[serde(default = "default_backoff")]
    pub retry_backoff_ms: u64,
    /// Replay script path, replay kind only.
    #[serde(default)]
    pub script: Option<PathBuf>,
}

impl BackendConfig {
    pub fn replay(script: impl Into<PathBuf>) -> Self {
        BackendConfig {
            kind: BackendKind::Replay,
            endpoint: String::new(),
            model: "replay".into(),
            api_key_env: None,
            temperature: 0.0,
            tool_mode: ToolMode::Native,
            request_timeout_secs: default_timeout(),
            max_retries: default_retries(),
            retry_backoff_ms: default_backoff(),
            script: Some(script.into()),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, BackendError> {
        toml::from_str(text).map_err(|e| BackendError::Config(e.to_string()))
    }

    pub fn from_toml_path(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

/// One completed model exchange, protocol-neutral.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatExchange {
    pub assistant_text: String,
    pub tool_calls: Vec<ToolCall>,
    /// Usage as reported by the backend; `None` means the caller must fall
    /// back to the word-count estimator.
    pub usage: Option<UsageRecord>,
}

pub trait ChatBackend {
    fn complete(
        &mut self,
        messages: &[ChatMessage],
        tools: &[&ToolDefinition],
    ) -> Result<ChatExchange, BackendError>;
}

/// Instantiates the backend described by `config`.
pub fn make_backend(config: &BackendConfig) -> Result<Box<dyn ChatBackend>, BackendError> {
    match config.kind {
        BackendKind::Replay => {
            let path = config
                .script
                .as_ref()
                .ok_or_else(|| BackendError::Config("replay backend requires script".into()))?;
            Ok(Box::new(ReplayBackend::new(ReplayScript::from_path(path)?)))
        }
        BackendKind::OpenaiCompat | BackendKind::Ollama => {
            Ok(Box::new(HttpBackend::new(config.clone())?))
        }
    }
}
