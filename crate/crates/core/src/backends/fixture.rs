//! Frozen wire fixtures: request/response body pairs on disk, used to pin
//! the serialization format.

use std::path::{Path, PathBuf};

use super::{build_request_body, parse_response_body, BackendConfig, BackendError};
use super::{BackendKind, ToolMode};
use crate::ledger::{ChatMessage, ToolCall, ToolDefinition};

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut name = stem.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    stem.with_file_name(name)
}

/// Writes `{stem}.req.json` (the canonical request body for this
/// conversation) and `{stem}.resp.json` (the given response body, validated
/// before anything touches disk). Only bodies are written; headers and
/// credentials never reach a file. On error no partial pair is left behind.
pub fn record_fixture(
    config: &BackendConfig,
    messages: &[ChatMessage],
    tools: &[&ToolDefinition],
    response_body: &str,
    stem: &Path,
) -> Result<(), BackendError> {
    let mut request = build_request_body(config, messages, tools)?;
    parse_response_body(config.kind, response_body, 0.0, messages.len())?;
    request.push('\n');
    let mut response = response_body.to_string();
    if !response.ends_with('\n') {
        response.push('\n');
    }

    let req_path = with_suffix(stem, ".req.json");
    let resp_path = with_suffix(stem, ".resp.json");
    std::fs::write(&req_path, request)
        .map_err(|e| BackendError::Io(format!("{}: {e}", req_path.display())))?;
    if let Err(e) = std::fs::write(&resp_path, response) {
        let _ = std::fs::remove_file(&req_path);
        return Err(BackendError::Io(format!("{}: {e}", resp_path.display())));
    }
    Ok(())
}

/// Files produced by [`record_reference_fixtures`].
pub const REFERENCE_FIXTURES: [&str; 6] = [
    "openai_toolcall.req.json",
    "openai_toolcall.resp.json",
    "ollama_toolcall.req.json",
    "ollama_toolcall.resp.json",
    "text_startdate.req.json",
    "text_startdate.resp.json",
];

/// Records the reference fixture set into `dir`: one native tool-call round
/// trip per wire protocol over the full sandbox tool schema, and a text-mode
/// reply whose fenced call misspells `start_date` as `startdate`, pinning
/// argument-name validation to the tool layer rather than extraction.
pub fn record_reference_fixtures(dir: &Path) -> Result<(), BackendError> {
    let registry = crate::sandbox::registry();
    let tools: Vec<&ToolDefinition> = registry.definitions().iter().collect();
    let messages = toolcall_messages();
    record_fixture(
        &openai_config(ToolMode::Native),
        &messages,
        &tools,
        OPENAI_TOOLCALL_RESPONSE,
        &dir.join("openai_toolcall"),
    )?;
    record_fixture(
        &ollama_config(),
        &messages,
        &tools,
        OLLAMA_TOOLCALL_RESPONSE,
        &dir.join("ollama_toolcall"),
    )?;
    // Text mode leaves the tools field out of the request body entirely.
    record_fixture(
        &openai_config(ToolMode::Text),
        &text_messages(),
        &tools,
        TEXT_STARTDATE_RESPONSE,
        &dir.join("text_startdate"),
    )?;
    Ok(())
}

fn openai_config(tool_mode: ToolMode) -> BackendConfig {
    BackendConfig {
        kind: BackendKind::OpenaiCompat,
        endpoint: "http://localhost:8000/v1".into(),
        model: "gpt-4o".into(),
        api_key_env: Some("OPENAI_API_KEY".into()),
        temperature: 0.0,
        tool_mode,
        request_timeout_secs: 120,
        max_retries: 2,
        retry_backoff_ms: 250,
        script: None,
    }
}

fn ollama_config() -> BackendConfig {
    BackendConfig {
        kind: BackendKind::Ollama,
        endpoint: "http://localhost:11434".into(),
        model: "llama3.1:8b".into(),
        api_key_env: None,
        temperature: 0.0,
        tool_mode: ToolMode::Native,
        request_timeout_secs: 120,
        max_retries: 2,
        retry_backoff_ms: 250,
        script: None,
    }
}

fn toolcall_messages() -> Vec<ChatMessage> {
    let call = ToolCall::new("call-0", "load_product").arg("product", "xview1");
    vec![
        ChatMessage::system("You run Earth-observation workflows as explicit stages.", 0),
        ChatMessage::user("Count every vessel in xview1 imagery for May 2020.", 0),
        ChatMessage::assistant("Loading the requested product.\nCURRENT_STAGE = Load", vec![call], 1),
        ChatMessage::tool("call-0", r#"{"handle":"h1","kind":"image_set","count":48}"#, 1),
    ]
}

fn text_messages() -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(
            "You run Earth-observation workflows as explicit stages. \
             Issue tool calls as fenced json blocks.",
            0,
        ),
        ChatMessage::user("Keep only the May 2020 images from handle h1.", 0),
    ]
}

const OPENAI_TOOLCALL_RESPONSE: &str = r#"{
  "id": "chatcmpl-ref-001",
  "object": "chat.completion",
  "model": "gpt-4o",
  "choices": [
    {
      "index": 0,
      "message": {
        "role": "assistant",
        "content": "Narrowing the stack to the requested month.\nCURRENT_STAGE = Filter",
        "tool_calls": [
          {
            "id": "call_f1",
            "type": "function",
            "function": {
              "name": "filter_temporal",
              "arguments": "{\"handle\": \"h1\", \"start_date\": \"2020-05-01\", \"end_date\": \"2020-05-31\"}"
            }
          }
        ]
      },
      "finish_reason": "tool_calls"
    }
  ],
  "usage": {
    "prompt_tokens": 2143,
    "completion_tokens": 27,
    "prompt_tokens_details": {
      "cached_tokens": 1920
    }
  }
}"#;

const OLLAMA_TOOLCALL_RESPONSE: &str = r#"{
  "model": "llama3.1:8b",
  "created_at": "2026-05-04T09:00:00Z",
  "message": {
    "role": "assistant",
    "content": "",
    "tool_calls": [
      {
        "function": {
          "name": "filter_temporal",
          "arguments": {
            "handle": "h1",
            "start_date": "2020-05-01",
            "end_date": "2020-05-31"
          }
        }
      }
    ]
  },
  "done": true,
  "prompt_eval_count": 2143,
  "eval_count": 27
}"#;

const TEXT_STARTDATE_RESPONSE: &str = r#"{
  "id": "chatcmpl-ref-002",
  "object": "chat.completion",
  "model": "gpt-4o",
  "choices": [
    {
      "index": 0,
      "message": {
        "role": "assistant",
        "content": "Narrowing the stack to the requested month.\n```json\n{\"name\": \"filter_temporal\", \"arguments\": {\"handle\": \"h1\", \"startdate\": \"2020-05-01\", \"end_date\": \"2020-05-31\"}}\n```\nCURRENT_STAGE = Filter"
      },
      "finish_reason": "stop"
    }
  ],
  "usage": {
    "prompt_tokens": 1830,
    "completion_tokens": 64
  }
}"#;
