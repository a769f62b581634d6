//! Scripted backend: assistant turns come from a file instead of a model.
//!
//! A script is line-delimited JSON of assistant records. Entries without a
//! `match_key` are ordinal and consumed in file order. Entries with one are
//! consumed, at most once each, whenever a request's match key equals
//! theirs; this lets a single script serve conversations whose turn count
//! varies (route retries, confirmation probes) by pinning specific prompts.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, ChatBackend, ChatExchange};
use crate::ledger::{ChatMessage, Ledger, Role, ToolCall, UsageRecord};

#[derive(Debug, Clone, PartialEq)]
pub enum ReplayKey {
    Ordinal(u32),
    /// Hex SHA-256 of `"{role}\n{content}"` of the request's last
    /// non-assistant message.
    Match(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEntry {
    pub key: ReplayKey,
    pub text: String,
    pub tool_calls: Vec<ToolCall>,
    pub usage: Option<UsageRecord>,
}

impl ReplayEntry {
    fn exchange(&self) -> ChatExchange {
        ChatExchange {
            assistant_text: self.text.clone(),
            tool_calls: self.tool_calls.clone(),
            usage: self.usage.clone(),
        }
    }
}

/// The match key a request would carry.
pub fn replay_match_key(messages: &[ChatMessage]) -> String {
    match messages.iter().rev().find(|m| m.role != Role::Assistant) {
        Some(m) => match_key_for(m.role, &m.content),
        None => match_key_for(Role::User, ""),
    }
}

pub fn match_key_for(role: Role, content: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(role.to_string().as_bytes());
    hasher.update(b"\n");
    hasher.update(content.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Default)]
pub struct ReplayScript {
    ordinal: Vec<ReplayEntry>,
    matches: Vec<(ReplayEntry, bool)>,
    cursor: usize,
}

impl ReplayScript {
    pub fn new() -> Self {
        ReplayScript::default()
    }

    pub fn push_ordinal(
        &mut self,
        text: impl Into<String>,
        tool_calls: Vec<ToolCall>,
        usage: Option<UsageRecord>,
    ) {
        let key = ReplayKey::Ordinal(self.ordinal.len() as u32);
        self.ordinal.push(ReplayEntry { key, text: text.into(), tool_calls, usage });
    }

    pub fn push_match(
        &mut self,
        match_key: impl Into<String>,
        text: impl Into<String>,
        tool_calls: Vec<ToolCall>,
        usage: Option<UsageRecord>,
    ) {
        self.matches.push((
            ReplayEntry {
                key: ReplayKey::Match(match_key.into()),
                text: text.into(),
                tool_calls,
                usage,
            },
            false,
        ));
    }

    pub fn ordinal_remaining(&self) -> usize {
        self.ordinal.len() - self.cursor
    }

    pub fn matches_remaining(&self) -> usize {
        self.matches.iter().filter(|(_, used)| !used).count()
    }

    /// Answers one request: a matching unused match entry if any, else the
    /// next ordinal entry.
    pub fn take(&mut self, messages: &[ChatMessage]) -> Result<ChatExchange, BackendError> {
        let key = replay_match_key(messages);
        for (entry, used) in self.matches.iter_mut() {
            if !*used && entry.key == ReplayKey::Match(key.clone()) {
                *used = true;
                return Ok(entry.exchange());
            }
        }
        match self.ordinal.get(self.cursor) {
            Some(entry) => {
                self.cursor += 1;
                Ok(entry.exchange())
            }
            None => Err(BackendError::Script(format!(
                "exhausted after {} ordinal entries (request key {key})",
                self.ordinal.len()
            ))),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let records = self
            .ordinal
            .iter()
            .map(|e| (e, None))
            .chain(self.matches.iter().map(|(e, _)| {
                let ReplayKey::Match(k) = &e.key else { unreachable!() };
                (e, Some(k.clone()))
            }));
        for (entry, match_key) in records {
            let rec = ScriptRecord {
                role: Role::Assistant,
                content: entry.text.clone(),
                tool_calls: if entry.tool_calls.is_empty() {
                    None
                } else {
                    Some(entry.tool_calls.clone())
                },
                usage: entry.usage.clone(),
                match_key,
            };
            out.push_str(&serde_json::to_string(&rec).expect("script record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, BackendError> {
        let mut script = ReplayScript::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ScriptRecord = serde_json::from_str(line)
                .map_err(|e| BackendError::Script(format!("line {}: {e}", lineno + 1)))?;
            if rec.role != Role::Assistant {
                return Err(BackendError::Script(format!(
                    "line {}: role must be assistant, got {}",
                    lineno + 1,
                    rec.role
                )));
            }
            let calls = rec.tool_calls.unwrap_or_default();
            match rec.match_key {
                Some(key) => script.push_match(key, rec.content, calls, rec.usage),
                None => script.push_ordinal(rec.content, calls, rec.usage),
            }
        }
        Ok(script)
    }

    pub fn from_path(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Io(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }

    pub fn write(&self, path: &Path) -> Result<(), BackendError> {
        std::fs::write(path, self.to_jsonl())
            .map_err(|e| BackendError::Io(format!("{}: {e}", path.display())))
    }

    /// Rebuilds a script from a recorded run: every assistant message
    /// becomes an ordinal entry carrying that exchange's usage.
    pub fn from_transcript(ledger: &Ledger) -> Self {
        let mut script = ReplayScript::new();
        for msg in ledger.messages() {
            if msg.role != Role::Assistant {
                continue;
            }
            script.push_ordinal(
                msg.content.clone(),
                msg.tool_calls.clone().unwrap_or_default(),
                ledger.usage_for(msg.turn_index).cloned(),
            );
        }
        script
    }
}

#[derive(Serialize, Deserialize)]
struct ScriptRecord {
    role: Role,
    content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tool_calls: Option<Vec<ToolCall>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    usage: Option<UsageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    match_key: Option<String>,
}

pub struct ReplayBackend {
    script: ReplayScript,
}

impl ReplayBackend {
    pub fn new(script: ReplayScript) -> Self {
        ReplayBackend { script }
    }

    pub fn script(&self) -> &ReplayScript {
        &self.script
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(
        &mut self,
        messages: &[ChatMessage],
        _tools: &[&crate::ledger::ToolDefinition],
    ) -> Result<ChatExchange, BackendError> {
        self.script.take(messages)
    }
}
