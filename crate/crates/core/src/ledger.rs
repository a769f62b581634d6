//! Typed message ledger shared by the agent loop, backends, and the
//! evaluation harness.
//!
//! A [`Ledger`] is the append-only conversation history of one task run:
//! system prompt first, then user / assistant / tool messages with strictly
//! increasing turn indices. Tool definitions and the tool registry also live
//! here because every other module exchanges them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("role violation: {0}")]
    RoleViolation(String),
    #[error("order violation: {0}")]
    OrderViolation(String),
    #[error("invalid tool definition: {0}")]
    InvalidDefinition(String),
    #[error("transcript i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("transcript parse: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        };
        f.write_str(s)
    }
}

/// One requested tool invocation. `arguments` maps parameter names to JSON
/// scalars or arrays; the map is sorted, so serialization is canonical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub call_id: String,
    pub name: String,
    pub arguments: serde_json::Map<String, serde_json::Value>,
}

impl ToolCall {
    pub fn new(call_id: impl Into<String>, name: impl Into<String>) -> Self {
        ToolCall {
            call_id: call_id.into(),
            name: name.into(),
            arguments: serde_json::Map::new(),
        }
    }

    pub fn arg(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.arguments.insert(key.to_string(), value.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolStatus {
    Ok,
    Error,
}

/// Outcome of executing one [`ToolCall`]. The payload is the serialized
/// result (or error message) handed back to the model as a tool message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub call_id: String,
    pub status: ToolStatus,
    pub payload: String,
}

impl ToolResult {
    pub fn ok(call_id: impl Into<String>, payload: impl Into<String>) -> Self {
        ToolResult { call_id: call_id.into(), status: ToolStatus::Ok, payload: payload.into() }
    }

    pub fn error(call_id: impl Into<String>, payload: impl Into<String>) -> Self {
        ToolResult { call_id: call_id.into(), status: ToolStatus::Error, payload: payload.into() }
    }

    pub fn is_error(&self) -> bool {
        self.status == ToolStatus::Error
    }
}

/// Token and wall-clock accounting for one backend exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub input_tokens: u64,
    pub cached_tokens: u64,
    pub output_tokens: u64,
    pub wall_seconds: f64,
    /// True when the counts come from the word-count estimator rather than
    /// a backend report.
    #[serde(default)]
    pub estimated: bool,
}

impl UsageRecord {
    pub fn reported(input: u64, cached: u64, output: u64, wall_seconds: f64) -> Self {
        UsageRecord {
            input_tokens: input,
            cached_tokens: cached,
            output_tokens: output,
            wall_seconds,
            estimated: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    /// Present only on assistant messages that request tool invocations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_calls: Option<Vec<ToolCall>>,
    /// Present exactly when `role` is `tool`; links back to the call.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
    pub turn_index: u32,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>, turn_index: u32) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
            tool_calls: None,
            tool_call_id: None,
            turn_index,
        }
    }

    pub fn user(content: impl Into<String>, turn_index: u32) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
            tool_calls: None,
            tool_call_id: None,
            turn_index,
        }
    }

    pub fn assistant(content: impl Into<String>, calls: Vec<ToolCall>, turn_index: u32) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
            tool_calls: if calls.is_empty() { None } else { Some(calls) },
            tool_call_id: None,
            turn_index,
        }
    }

    pub fn tool(call_id: impl Into<String>, payload: impl Into<String>, turn_index: u32) -> Self {
        ChatMessage {
            role: Role::Tool,
            content: payload.into(),
            tool_calls: None,
            tool_call_id: Some(call_id.into()),
            turn_index,
        }
    }
}

/// Word-count token estimator used when a backend omits usage reporting:
/// `ceil(words * 4 / 3)`.
pub fn estimate_tokens(text: &str) -> u64 {
    let words = text.split_whitespace().count() as u64;
    (words * 4).div_ceil(3)
}

/// Summed token usage for a whole ledger.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTotals {
    pub input_tokens: u64,
    pub cached_tokens: u64,
    pub output_tokens: u64,
    /// True when any contribution came from the estimator.
    pub estimated: bool,
}

impl TokenTotals {
    pub fn total(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }

    fn add_usage(&mut self, u: &UsageRecord) {
        self.input_tokens += u.input_tokens;
        self.cached_tokens += u.cached_tokens;
        self.output_tokens += u.output_tokens;
        self.estimated |= u.estimated;
    }
}

/// Append-only conversation history with per-exchange usage records keyed
/// by the assistant message's turn index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    messages: Vec<ChatMessage>,
    usage: BTreeMap<u32, UsageRecord>,
}

impl Ledger {
    pub fn new() -> Self {
        Ledger::default()
    }

    pub fn messages(&self) -> &[ChatMessage] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn next_turn_index(&self) -> u32 {
        self.messages.last().map(|m| m.turn_index + 1).unwrap_or(0)
    }

    pub fn usage_for(&self, turn_index: u32) -> Option<&UsageRecord> {
        self.usage.get(&turn_index)
    }

    /// Appends one message, enforcing role placement and turn ordering.
    pub fn append(&mut self, msg: ChatMessage) -> Result<(), LedgerError> {
        if self.messages.is_empty() {
            if msg.role != Role::System {
                return Err(LedgerError::RoleViolation(format!(
                    "first message must have role system, got {}",
                    msg.role
                )));
            }
            if msg.turn_index != 0 {
                return Err(LedgerError::OrderViolation(format!(
                    "first message must have turn_index 0, got {}",
                    msg.turn_index
                )));
            }
        } else {
            let expect = self.next_turn_index();
            if msg.turn_index != expect {
                return Err(LedgerError::OrderViolation(format!(
                    "expected turn_index {expect}, got {}",
                    msg.turn_index
                )));
            }
        }
        if msg.tool_calls.is_some() && msg.role != Role::Assistant {
            return Err(LedgerError::RoleViolation(format!(
                "tool_calls only allowed on assistant messages, got {}",
                msg.role
            )));
        }
        match (msg.role, msg.tool_call_id.is_some()) {
            (Role::Tool, false) => {
                return Err(LedgerError::RoleViolation(
                    "tool message requires tool_call_id".into(),
                ))
            }
            (r, true) if r != Role::Tool => {
                return Err(LedgerError::RoleViolation(format!(
                    "tool_call_id only allowed on tool messages, got {r}"
                )))
            }
            _ => {}
        }
        self.messages.push(msg);
        Ok(())
    }

    /// Attaches a backend usage record to the exchange whose assistant
    /// message has `turn_index`.
    pub fn record_usage(&mut self, turn_index: u32, usage: UsageRecord) {
        self.usage.insert(turn_index, usage);
    }

    /// Sums token usage over all exchanges. Exchanges with a backend report
    /// contribute that record verbatim; an assistant message without one
    /// contributes the estimator count for the request content accumulated
    /// since the previous exchange (input side) and its own content (output
    /// side), with the result flagged as estimated.
    pub fn token_totals(&self) -> TokenTotals {
        let mut totals = TokenTotals::default();
        let mut pending_input: u64 = 0;
        for msg in &self.messages {
            if msg.role == Role::Assistant {
                if let Some(u) = self.usage.get(&msg.turn_index) {
                    totals.add_usage(u);
                } else {
                    totals.input_tokens += pending_input;
                    totals.output_tokens += estimate_tokens(&msg.content);
                    totals.estimated = true;
                }
                pending_input = 0;
            } else {
                pending_input += estimate_tokens(&msg.content);
            }
        }
        if pending_input > 0 {
            totals.input_tokens += pending_input;
            totals.estimated = true;
        }
        totals
    }

    /// Total wall-clock seconds across recorded exchanges.
    pub fn wall_seconds(&self) -> f64 {
        self.usage.values().map(|u| u.wall_seconds).sum()
    }

    /// Checks that every tool message's `tool_call_id` resolves to exactly
    /// one tool call on an earlier assistant message.
    pub fn verify_tool_links(&self) -> Result<(), LedgerError> {
        for (i, msg) in self.messages.iter().enumerate() {
            if msg.role != Role::Tool {
                continue;
            }
            let id = msg.tool_call_id.as_deref().unwrap_or_default();
            let hits = self.messages[..i]
                .iter()
                .filter(|m| m.role == Role::Assistant)
                .flat_map(|m| m.tool_calls.iter().flatten())
                .filter(|c| c.call_id == id)
                .count();
            if hits != 1 {
                return Err(LedgerError::RoleViolation(format!(
                    "tool message at turn {} resolves to {hits} prior calls for id {id:?}",
                    msg.turn_index
                )));
            }
        }
        Ok(())
    }

    /// Serializes the ledger as line-delimited JSON, one message per line.
    pub fn to_transcript_string(&self) -> String {
        let mut out = String::new();
        for msg in &self.messages {
            let rec = TranscriptRecord {
                turn_index: msg.turn_index,
                role: msg.role,
                content: &msg.content,
                tool_calls: msg.tool_calls.as_deref(),
                tool_call_id: msg.tool_call_id.as_deref(),
                usage: self.usage.get(&msg.turn_index),
            };
            out.push_str(&serde_json::to_string(&rec).expect("transcript record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_transcript(&self, path: &Path) -> Result<(), LedgerError> {
        std::fs::write(path, self.to_transcript_string())?;
        Ok(())
    }

    /// Parses a transcript produced by [`Ledger::to_transcript_string`],
    /// re-validating every message through [`Ledger::append`].
    pub fn from_transcript_str(text: &str) -> Result<Ledger, LedgerError> {
        let mut ledger = Ledger::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: OwnedTranscriptRecord = serde_json::from_str(line)?;
            let turn_index = rec.turn_index;
            ledger.append(ChatMessage {
                role: rec.role,
                content: rec.content,
                tool_calls: rec.tool_calls,
                tool_call_id: rec.tool_call_id,
                turn_index,
            })?;
            if let Some(u) = rec.usage {
                ledger.record_usage(turn_index, u);
            }
        }
        Ok(ledger)
    }

    pub fn read_transcript(path: &Path) -> Result<Ledger, LedgerError> {
        Ledger::from_transcript_str(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize)]
struct TranscriptRecord<'a> {
    turn_index: u32,
    role: Role,
    content: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    tool_calls: Option<&'a [ToolCall]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tool_call_id: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    usage: Option<&'a UsageRecord>,
}

#[derive(Deserialize)]
struct OwnedTranscriptRecord {
    turn_index: u32,
    role: Role,
    content: String,
    #[serde(default)]
    tool_calls: Option<Vec<ToolCall>>,
    #[serde(default)]
    tool_call_id: Option<String>,
    #[serde(default)]
    usage: Option<UsageRecord>,
}

/// Declared parameter type for tool schemas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ParamKind {
    String,
    Integer,
    Number,
    Boolean,
    Enum { values: Vec<String> },
    Array { elem: Box<ParamKind> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub required: bool,
    pub description: String,
}

impl ParamSpec {
    pub fn required(name: &str, kind: ParamKind, description: &str) -> Self {
        ParamSpec { name: name.into(), kind, required: true, description: description.into() }
    }

    pub fn optional(name: &str, kind: ParamKind, description: &str) -> Self {
        ParamSpec { name: name.into(), kind, required: false, description: description.into() }
    }
}

/// Schema for one callable tool, serialized to each backend's wire format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDefinition {
    pub name: String,
    pub description: String,
    pub parameters: Vec<ParamSpec>,
}

fn valid_tool_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

impl ToolDefinition {
    pub fn new(name: &str, description: &str, parameters: Vec<ParamSpec>) -> Self {
        ToolDefinition { name: name.into(), description: description.into(), parameters }
    }

    pub fn validate(&self) -> Result<(), LedgerError> {
        if !valid_tool_name(&self.name) {
            return Err(LedgerError::InvalidDefinition(format!(
                "tool name {:?} must match [a-z][a-z0-9_]*",
                self.name
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.parameters {
            if !seen.insert(p.name.as_str()) {
                return Err(LedgerError::InvalidDefinition(format!(
                    "tool {:?} declares parameter {:?} twice",
                    self.name, p.name
                )));
            }
        }
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

/// Ordered set of tool definitions with unique names. Order is the order
/// tools are presented to backends when no gating applies.
#[derive(Debug, Clone, Default)]
pub struct ToolRegistry {
    tools: Vec<ToolDefinition>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        ToolRegistry::default()
    }

    pub fn register(&mut self, def: ToolDefinition) -> Result<(), LedgerError> {
        def.validate()?;
        if self.get(&def.name).is_some() {
            return Err(LedgerError::InvalidDefinition(format!(
                "tool {:?} registered twice",
                def.name
            )));
        }
        self.tools.push(def);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ToolDefinition> {
        self.tools.iter().find(|t| t.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn definitions(&self) -> &[ToolDefinition] {
        &self.tools
    }

    pub fn names(&self) -> Vec<&str> {
        self.tools.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }
}
