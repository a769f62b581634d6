//! Tool-call extraction from plain assistant text, for models served
//! without native tool support.
//!
//! Two syntaxes are recognized, in document order: fenced ```json blocks
//! and `<tool_call>...</tool_call>` tags. Each block must hold a single
//! object `{"name": ..., "arguments": {...}}`. Blocks that do not look like
//! calls are ignored; calls naming unknown tools are dropped but reported.

use std::sync::OnceLock;

use regex::Regex;
use serde_json::Value;

use crate::ledger::{ParamKind, ToolCall, ToolDefinition};

#[derive(Debug, Clone, PartialEq)]
pub struct TextExtraction {
    pub calls: Vec<ToolCall>,
    /// Requested tool names outside the allowed set, in order of appearance.
    pub dropped: Vec<String>,
}

fn fence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"```(?:json)?\s*([\s\S]*?)```").unwrap())
}

fn tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<tool_call>([\s\S]*?)</tool_call>").unwrap())
}

/// Extracts tool calls from `text`. `call_id_seed` keeps synthesized call
/// ids unique across turns; callers pass the conversation length.
pub fn extract_text_calls(
    text: &str,
    tools: &[&ToolDefinition],
    call_id_seed: usize,
) -> TextExtraction {
    let mut blocks: Vec<(usize, &str)> = Vec::new();
    for caps in fence_re().captures_iter(text) {
        let m = caps.get(1).unwrap();
        blocks.push((m.start(), m.as_str()));
    }
    for caps in tag_re().captures_iter(text) {
        let m = caps.get(1).unwrap();
        blocks.push((m.start(), m.as_str()));
    }
    blocks.sort_by_key(|(at, _)| *at);

    let mut calls = Vec::new();
    let mut dropped = Vec::new();
    for (_, block) in blocks {
        let Ok(value) = serde_json::from_str::<Value>(block.trim()) else { continue };
        let Value::Object(mut obj) = value else { continue };
        let Some(Value::String(name)) = obj.remove("name") else { continue };
        let arguments = match obj.remove("arguments") {
            None | Some(Value::Null) => serde_json::Map::new(),
            Some(Value::Object(map)) => map,
            Some(Value::String(encoded)) => match serde_json::from_str::<Value>(&encoded) {
                Ok(Value::Object(map)) => map,
                _ => continue,
            },
            Some(_) => continue,
        };
        let Some(def) = tools.iter().find(|d| d.name == name) else {
            dropped.push(name);
            continue;
        };
        let arguments = coerce_kinds(def, arguments);
        calls.push(ToolCall {
            call_id: format!("text-{call_id_seed}-{}", calls.len()),
            name,
            arguments,
        });
    }
    TextExtraction { calls, dropped }
}

/// Converts string-typed values to the declared parameter kind where the
/// conversion is unambiguous. Undeclared argument names pass through
/// untouched so downstream validation can report them.
fn coerce_kinds(
    def: &ToolDefinition,
    mut args: serde_json::Map<String, Value>,
) -> serde_json::Map<String, Value> {
    for p in &def.parameters {
        if let Some(v) = args.get_mut(&p.name) {
            coerce_value(&p.kind, v);
        }
    }
    args
}

fn coerce_value(kind: &ParamKind, v: &mut Value) {
    match kind {
        ParamKind::Integer => {
            if let Value::String(s) = v {
                if let Ok(n) = s.trim().parse::<i64>() {
                    *v = Value::from(n);
                }
            }
        }
        ParamKind::Number => {
            if let Value::String(s) = v {
                if let Ok(n) = s.trim().parse::<f64>() {
                    if let Some(num) = serde_json::Number::from_f64(n) {
                        *v = Value::Number(num);
                    }
                }
            }
        }
        ParamKind::Boolean => {
            if let Value::String(s) = v {
                match s.trim() {
                    "true" => *v = Value::Bool(true),
                    "false" => *v = Value::Bool(false),
                    _ => {}
                }
            }
        }
        ParamKind::Array { elem } => {
            if let Value::Array(items) = v {
                for item in items {
                    coerce_value(elem, item);
                }
            }
        }
        ParamKind::String | ParamKind::Enum { .. } => {}
    }
}
