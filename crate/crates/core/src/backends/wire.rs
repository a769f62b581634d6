//! Request and response bodies for the two HTTP chat protocols.
//!
//! Request serialization is canonical: struct fields emit in a fixed order
//! and every map is sorted, so the same conversation always produces the
//! same bytes. Response parsing is lenient about fields this engine does
//! not use.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendConfig, BackendError, BackendKind, ChatExchange, ToolMode};
use crate::ledger::{ChatMessage, ParamKind, ToolCall, ToolDefinition, UsageRecord};

/// Builds the JSON request body for `config.kind`. In text tool mode the
/// native tools field is omitted; the prompt is expected to carry the tool
/// documentation instead.
pub fn build_request_body(
    config: &BackendConfig,
    messages: &[ChatMessage],
    tools: &[&ToolDefinition],
) -> Result<String, BackendError> {
    let tool_entries = match config.tool_mode {
        ToolMode::Native if !tools.is_empty() => {
            Some(tools.iter().map(|d| tool_entry(d)).collect())
        }
        _ => None,
    };
    let body = match config.kind {
        BackendKind::OpenaiCompat => {
            let request = OpenAiRequest {
                model: &config.model,
                messages: messages.iter().map(openai_message).collect(),
                tools: tool_entries,
                temperature: config.temperature,
                stream: false,
            };
            serde_json::to_string(&request)
        }
        BackendKind::Ollama => {
            let request = OllamaRequest {
                model: &config.model,
                messages: messages.iter().map(ollama_message).collect(),
                tools: tool_entries,
                stream: false,
                options: OllamaOptions { temperature: config.temperature },
            };
            serde_json::to_string(&request)
        }
        BackendKind::Replay => {
            return Err(BackendError::Protocol("replay backend has no wire format".into()))
        }
    };
    body.map_err(|e| BackendError::Protocol(format!("request serialization: {e}")))
}

/// Parses a response body. `call_id_seed` disambiguates synthesized call ids
/// when the backend omits them; callers pass the request message count.
pub fn parse_response_body(
    kind: BackendKind,
    body: &str,
    wall_seconds: f64,
    call_id_seed: usize,
) -> Result<ChatExchange, BackendError> {
    match kind {
        BackendKind::OpenaiCompat => parse_openai(body, wall_seconds, call_id_seed),
        BackendKind::Ollama => parse_ollama(body, wall_seconds, call_id_seed),
        BackendKind::Replay => {
            Err(BackendError::Protocol("replay backend has no wire format".into()))
        }
    }
}

/// Plain-text rendering of tool schemas for text tool mode.
pub fn render_tool_docs(tools: &[&ToolDefinition]) -> String {
    let mut out = String::new();
    for def in tools {
        out.push_str(&format!("### {}\n{}\n", def.name, def.description));
        if def.parameters.is_empty() {
            out.push_str("Arguments: none.\n");
        } else {
            out.push_str("Arguments:\n");
            for p in &def.parameters {
                let need = if p.required { "required" } else { "optional" };
                out.push_str(&format!(
                    "- {} ({}, {need}): {}",
                    p.name,
                    kind_doc(&p.kind),
                    p.description
                ));
                if let ParamKind::Enum { values } = &p.kind {
                    out.push_str(&format!(" One of: {}.", values.join(", ")));
                }
                out.push('\n');
            }
        }
        out.push('\n');
    }
    out.trim_end().to_string()
}

fn kind_doc(kind: &ParamKind) -> String {
    match kind {
        ParamKind::String | ParamKind::Enum { .. } => "string".into(),
        ParamKind::Integer => "integer".into(),
        ParamKind::Number => "number".into(),
        ParamKind::Boolean => "boolean".into(),
        ParamKind::Array { elem } => format!("array of {}", kind_doc(elem)),
    }
}

fn kind_schema(kind: &ParamKind) -> Value {
    match kind {
        ParamKind::String => json!({ "type": "string" }),
        ParamKind::Integer => json!({ "type": "integer" }),
        ParamKind::Number => json!({ "type": "number" }),
        ParamKind::Boolean => json!({ "type": "boolean" }),
        ParamKind::Enum { values } => json!({ "type": "string", "enum": values }),
        ParamKind::Array { elem } => json!({ "type": "array", "items": kind_schema(elem) }),
    }
}

fn tool_entry(def: &ToolDefinition) -> ToolEntry {
    let mut properties = serde_json::Map::new();
    let mut required = Vec::new();
    for p in &def.parameters {
        let mut schema = kind_schema(&p.kind);
        schema["description"] = Value::from(p.description.clone());
        properties.insert(p.name.clone(), schema);
        if p.required {
            required.push(p.name.clone());
        }
    }
    ToolEntry {
        kind: "function",
        function: FunctionSchema {
            name: def.name.clone(),
            description: def.description.clone(),
            parameters: json!({ "type": "object", "properties": properties, "required": required }),
        },
    }
}

fn openai_message(m: &ChatMessage) -> OpenAiMessage {
    OpenAiMessage {
        role: m.role.to_string(),
        content: m.content.clone(),
        tool_calls: m.tool_calls.as_ref().map(|calls| {
            calls
                .iter()
                .map(|c| OpenAiCallOut {
                    id: c.call_id.clone(),
                    kind: "function",
                    function: OpenAiFunctionOut {
                        name: c.name.clone(),
                        arguments: serde_json::to_string(&c.arguments)
                            .expect("argument map serializes"),
                    },
                })
                .collect()
        }),
        tool_call_id: m.tool_call_id.clone(),
    }
}

fn ollama_message(m: &ChatMessage) -> OllamaMessage {
    OllamaMessage {
        role: m.role.to_string(),
        content: m.content.clone(),
        tool_calls: m.tool_calls.as_ref().map(|calls| {
            calls
                .iter()
                .map(|c| OllamaCallOut {
                    function: OllamaFunctionOut {
                        name: c.name.clone(),
                        arguments: c.arguments.clone(),
                    },
                })
                .collect()
        }),
    }
}

#[derive(Serialize)]
struct OpenAiRequest<'a> {
    model: &'a str,
    messages: Vec<OpenAiMessage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tools: Option<Vec<ToolEntry>>,
    temperature: f64,
    stream: bool,
}

#[derive(Serialize)]
struct OpenAiMessage {
    role: String,
    content: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    tool_calls: Option<Vec<OpenAiCallOut>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tool_call_id: Option<String>,
}

#[derive(Serialize)]
struct OpenAiCallOut {
    id: String,
    #[serde(rename = "type")]
    kind: &'static str,
    function: OpenAiFunctionOut,
}

#[derive(Serialize)]
struct OpenAiFunctionOut {
    name: String,
    /// JSON-encoded argument object, per the protocol.
    arguments: String,
}

#[derive(Serialize)]
struct ToolEntry {
    #[serde(rename = "type")]
    kind: &'static str,
    function: FunctionSchema,
}

#[derive(Serialize)]
struct FunctionSchema {
    name: String,
    description: String,
    parameters: Value,
}

#[derive(Serialize)]
struct OllamaRequest<'a> {
    model: &'a str,
    messages: Vec<OllamaMessage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tools: Option<Vec<ToolEntry>>,
    stream: bool,
    options: OllamaOptions,
}

#[derive(Serialize)]
struct OllamaMessage {
    role: String,
    content: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    tool_calls: Option<Vec<OllamaCallOut>>,
}

#[derive(Serialize)]
struct OllamaCallOut {
    function: OllamaFunctionOut,
}

#[derive(Serialize)]
struct OllamaFunctionOut {
    name: String,
    arguments: serde_json::Map<String, Value>,
}

#[derive(Serialize)]
struct OllamaOptions {
    temperature: f64,
}

fn coerce_arguments(value: Value) -> Result<serde_json::Map<String, Value>, BackendError> {
    match value {
        Value::Null => Ok(serde_json::Map::new()),
        Value::Object(map) => Ok(map),
        Value::String(text) => match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(map)) => Ok(map),
            Ok(other) => Err(BackendError::Protocol(format!(
                "tool call arguments must be an object, got {other}"
            ))),
            Err(e) => Err(BackendError::Protocol(format!("tool call arguments: {e}"))),
        },
        other => {
            Err(BackendError::Protocol(format!("tool call arguments must be an object, got {other}")))
        }
    }
}

fn parse_openai(
    body: &str,
    wall_seconds: f64,
    call_id_seed: usize,
) -> Result<ChatExchange, BackendError> {
    #[derive(Deserialize)]
    struct Response {
        choices: Vec<Choice>,
        #[serde(default)]
        usage: Option<Usage>,
    }
    #[derive(Deserialize)]
    struct Choice {
        message: Message,
    }
    #[derive(Deserialize)]
    struct Message {
        #[serde(default)]
        content: Option<String>,
        #[serde(default)]
        tool_calls: Option<Vec<Call>>,
    }
    #[derive(Deserialize)]
    struct Call {
        #[serde(default)]
        id: Option<String>,
        function: Function,
    }
    #[derive(Deserialize)]
    struct Function {
        name: String,
        #[serde(default)]
        arguments: Value,
    }
    #[derive(Deserialize)]
    struct Usage {
        #[serde(default)]
        prompt_tokens: u64,
        #[serde(default)]
        completion_tokens: u64,
        #[serde(default)]
        prompt_tokens_details: Option<PromptDetails>,
    }
    #[derive(Deserialize)]
    struct PromptDetails {
        #[serde(default)]
        cached_tokens: u64,
    }

    let parsed: Response =
        serde_json::from_str(body).map_err(|e| BackendError::Protocol(format!("response: {e}")))?;
    let choice = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
    let mut tool_calls = Vec::new();
    for (i, call) in choice.message.tool_calls.unwrap_or_default().into_iter().enumerate() {
        let call_id = match call.id {
            Some(id) if !id.is_empty() => id,
            _ => format!("call-{call_id_seed}-{i}"),
        };
        tool_calls.push(ToolCall {
            call_id,
            name: call.function.name,
            arguments: coerce_arguments(call.function.arguments)?,
        });
    }
    let usage = parsed.usage.map(|u| {
        let cached = u.prompt_tokens_details.map(|d| d.cached_tokens).unwrap_or(0);
        UsageRecord::reported(u.prompt_tokens, cached, u.completion_tokens, wall_seconds)
    });
    Ok(ChatExchange {
        assistant_text: choice.message.content.unwrap_or_default(),
        tool_calls,
        usage,
    })
}

fn parse_ollama(
    body: &str,
    wall_seconds: f64,
    call_id_seed: usize,
) -> Result<ChatExchange, BackendError> {
    #[derive(Deserialize)]
    struct Response {
        message: Message,
        #[serde(default)]
        prompt_eval_count: Option<u64>,
        #[serde(default)]
        eval_count: Option<u64>,
    }
    #[derive(Deserialize)]
    struct Message {
        #[serde(default)]
        content: Option<String>,
        #[serde(default)]
        tool_calls: Option<Vec<Call>>,
    }
    #[derive(Deserialize)]
    struct Call {
        function: Function,
    }
    #[derive(Deserialize)]
    struct Function {
        name: String,
        #[serde(default)]
        arguments: Value,
    }

    let parsed: Response =
        serde_json::from_str(body).map_err(|e| BackendError::Protocol(format!("response: {e}")))?;
    let mut tool_calls = Vec::new();
    for (i, call) in parsed.message.tool_calls.unwrap_or_default().into_iter().enumerate() {
        tool_calls.push(ToolCall {
            call_id: format!("call-{call_id_seed}-{i}"),
            name: call.function.name,
            arguments: coerce_arguments(call.function.arguments)?,
        });
    }
    let usage = if parsed.prompt_eval_count.is_some() || parsed.eval_count.is_some() {
        Some(UsageRecord::reported(
            parsed.prompt_eval_count.unwrap_or(0),
            0,
            parsed.eval_count.unwrap_or(0),
            wall_seconds,
        ))
    } else {
        None
    };
    Ok(ChatExchange {
        assistant_text: parsed.message.content.unwrap_or_default(),
        tool_calls,
        usage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox;

    fn openai_config() -> BackendConfig {
        BackendConfig {
            kind: BackendKind::OpenaiCompat,
            endpoint: "http://localhost:8000".into(),
            model: "test-model".into(),
            api_key_env: None,
            temperature: 0.0,
            tool_mode: ToolMode::Native,
            request_timeout_secs: 120,
            max_retries: 0,
            retry_backoff_ms: 1,
            script: None,
        }
    }

    fn sample_messages() -> Vec<ChatMessage> {
        vec![
            ChatMessage::system("You are an assistant.", 0),
            ChatMessage::user("Load xview1.", 1),
        ]
    }

    #[test]
    fn openai_body_is_canonical_and_ordered() {
        let reg = sandbox::registry();
        let tools: Vec<&ToolDefinition> = reg.definitions().iter().collect();
        let body = build_request_body(&openai_config(), &sample_messages(), &tools).unwrap();
        let again = build_request_body(&openai_config(), &sample_messages(), &tools).unwrap();
        assert_eq!(body, again);

        let order = ["\"model\"", "\"messages\"", "\"tools\"", "\"temperature\"", "\"stream\""];
        let mut last = 0;
        for key in order {
            let at = body.find(key).unwrap_or_else(|| panic!("{key} missing"));
            assert!(at > last || last == 0, "{key} out of order");
            last = at;
        }
        assert!(body.contains("\"stream\":false"));

        let v: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(v["messages"].as_array().unwrap().len(), 2);
        assert_eq!(v["tools"].as_array().unwrap().len(), reg.len());
        let load = &v["tools"][0]["function"];
        assert_eq!(load["name"], "load_product");
        assert_eq!(load["parameters"]["required"][0], "product");
        assert_eq!(load["parameters"]["properties"]["product"]["enum"][0], "xview1");
    }

    #[test]
    fn text_mode_omits_native_tools() {
        let mut cfg = openai_config();
        cfg.tool_mode = ToolMode::Text;
        let reg = sandbox::registry();
        let tools: Vec<&ToolDefinition> = reg.definitions().iter().collect();
        let body = build_request_body(&cfg, &sample_messages(), &tools).unwrap();
        let v: Value = serde_json::from_str(&body).unwrap();
        assert!(v.get("tools").is_none());
    }

    #[test]
    fn assistant_calls_are_json_encoded_strings_for_openai() {
        let call = ToolCall::new("c1", "load_product").arg("product", "xview1");
        let messages = vec![
            ChatMessage::system("p", 0),
            ChatMessage::assistant("", vec![call], 1),
            ChatMessage::tool("c1", "{\"handle\":\"h1\"}", 2),
        ];
        let body = build_request_body(&openai_config(), &messages, &[]).unwrap();
        let v: Value = serde_json::from_str(&body).unwrap();
        let wire_call = &v["messages"][1]["tool_calls"][0];
        assert_eq!(wire_call["id"], "c1");
        assert_eq!(wire_call["type"], "function");
        assert_eq!(wire_call["function"]["arguments"], "{\"product\":\"xview1\"}");
        assert_eq!(v["messages"][2]["tool_call_id"], "c1");
    }

    #[test]
    fn ollama_body_uses_object_arguments_and_options() {
        let mut cfg = openai_config();
        cfg.kind = BackendKind::Ollama;
        cfg.temperature = 0.5;
        let call = ToolCall::new("c1", "load_product").arg("product", "xview1");
        let messages =
            vec![ChatMessage::system("p", 0), ChatMessage::assistant("", vec![call], 1)];
        let body = build_request_body(&cfg, &messages, &[]).unwrap();
        let v: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(v["options"]["temperature"], 0.5);
        assert_eq!(v["stream"], false);
        assert_eq!(
            v["messages"][1]["tool_calls"][0]["function"]["arguments"]["product"],
            "xview1"
        );
    }

    #[test]
    fn openai_response_with_string_arguments_parses() {
        let body = r#"{
            "choices": [{"message": {"role": "assistant", "content": null,
                "tool_calls": [{"id": "call_abc", "type": "function",
                    "function": {"name": "load_product", "arguments": "{\"product\": \"xview1\"}"}}]},
                "finish_reason": "tool_calls"}],
            "usage": {"prompt_tokens": 120, "completion_tokens": 18,
                "prompt_tokens_details": {"cached_tokens": 64}}
        }"#;
        let ex = parse_response_body(BackendKind::OpenaiCompat, body, 0.5, 3).unwrap();
        assert_eq!(ex.assistant_text, "");
        assert_eq!(ex.tool_calls.len(), 1);
        assert_eq!(ex.tool_calls[0].call_id, "call_abc");
        assert_eq!(ex.tool_calls[0].name, "load_product");
        assert_eq!(ex.tool_calls[0].arguments["product"], "xview1");
        let usage = ex.usage.unwrap();
        assert_eq!((usage.input_tokens, usage.cached_tokens, usage.output_tokens), (120, 64, 18));
        assert!(!usage.estimated);
    }

    #[test]
    fn openai_response_with_object_arguments_and_no_id() {
        let body = r#"{"choices": [{"message": {"content": "ok",
            "tool_calls": [{"function": {"name": "list_products", "arguments": {}}}]}}]}"#;
        let ex = parse_response_body(BackendKind::OpenaiCompat, body, 0.0, 7).unwrap();
        assert_eq!(ex.tool_calls[0].call_id, "call-7-0");
        assert!(ex.usage.is_none());
    }

    #[test]
    fn openai_response_without_choices_is_protocol_error() {
        let err =
            parse_response_body(BackendKind::OpenaiCompat, r#"{"choices": []}"#, 0.0, 0).unwrap_err();
        assert!(matches!(err, BackendError::Protocol(_)));
    }

    #[test]
    fn malformed_argument_string_is_protocol_error() {
        let body = r#"{"choices": [{"message": {"content": "",
            "tool_calls": [{"id": "c", "function": {"name": "x", "arguments": "{broken"}}]}}]}"#;
        let err = parse_response_body(BackendKind::OpenaiCompat, body, 0.0, 0).unwrap_err();
        assert!(matches!(err, BackendError::Protocol(_)));
    }

    #[test]
    fn ollama_response_parses_with_synthesized_ids() {
        let body = r#"{
            "model": "llama3.1:8b", "created_at": "2024-01-01T00:00:00Z",
            "message": {"role": "assistant", "content": "",
                "tool_calls": [{"function": {"name": "load_product", "arguments": {"product": "xview1"}}}]},
            "done": true, "prompt_eval_count": 95, "eval_count": 12
        }"#;
        let ex = parse_response_body(BackendKind::Ollama, body, 1.25, 4).unwrap();
        assert_eq!(ex.tool_calls[0].call_id, "call-4-0");
        assert_eq!(ex.tool_calls[0].arguments["product"], "xview1");
        let usage = ex.usage.unwrap();
        assert_eq!((usage.input_tokens, usage.cached_tokens, usage.output_tokens), (95, 0, 12));
        assert_eq!(usage.wall_seconds, 1.25);
    }

    #[test]
    fn ollama_response_without_counts_has_no_usage() {
        let body = r#"{"message": {"role": "assistant", "content": "hi"}, "done": true}"#;
        let ex = parse_response_body(BackendKind::Ollama, body, 0.0, 0).unwrap();
        assert_eq!(ex.assistant_text, "hi");
        assert!(ex.usage.is_none());
    }

    #[test]
    fn tool_docs_render_names_kinds_and_enums() {
        let reg = sandbox::registry();
        let tools: Vec<&ToolDefinition> = reg.definitions().iter().collect();
        let docs = render_tool_docs(&tools);
        assert!(docs.contains("### load_product"));
        assert!(docs.contains("One of: xview1, sentinel2, modis_terra."));
        assert!(docs.contains("- bbox (array of number, optional)"));
        assert!(docs.contains("Arguments: none."));
    }
}
