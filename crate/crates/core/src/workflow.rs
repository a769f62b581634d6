//! Workflow state machines: loading, stage/intent tag parsing, transition
//! validation, and per-state tool gating.
//!
//! A workflow is a set of named states with declared transitions. Two edges
//! exist implicitly from every non-terminal state and are never written in
//! the document: a self-loop, and an edge to the error state when one is
//! declared. The assistant reports where it is with a `CURRENT_STAGE = Name`
//! line; intent-routed workflows additionally use `USER_INTENT = Name`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::Deserialize;
use thiserror::Error;

use crate::ledger::{ToolCall, ToolDefinition, ToolRegistry};

/// Name of the universal answer tool, available in every state.
pub const FINAL_ANSWER: &str = "final_answer";

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("unknown tool {tool:?} in state {state:?}")]
    UnknownTool { state: String, tool: String },
    #[error("unknown state {0:?}")]
    UnknownState(String),
    #[error("unknown current state {0:?}")]
    UnknownCurrentState(String),
}

/// One user/assistant demonstration pair attached to a state.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotExample {
    pub user: String,
    pub assistant: String,
    pub tool_calls: Vec<ToolCall>,
}

/// One workflow state: prompt text, gated tools, optional demonstrations.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpec {
    pub name: String,
    pub instructions: String,
    pub allowed_tools: Vec<String>,
    pub few_shot: Vec<FewShotExample>,
    pub is_terminal: bool,
    pub is_error: bool,
}

/// A validated workflow definition.
#[derive(Debug, Clone)]
pub struct WorkflowSpec {
    pub name: String,
    /// Workflow description given to the model as the system prompt.
    pub preamble: String,
    pub initial: String,
    states: Vec<StateSpec>,
    transitions: BTreeMap<String, Vec<String>>,
    /// `(intent, entry state)` pairs in declaration order.
    pub intent_routes: Vec<(String, String)>,
    error_state: Option<String>,
}

fn valid_state_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowDoc {
    name: String,
    preamble: String,
    initial: String,
    #[serde(default)]
    intents: Vec<IntentDoc>,
    states: Vec<StateDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IntentDoc {
    intent: String,
    entry: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StateDoc {
    name: String,
    instructions: String,
    #[serde(default)]
    tools: Vec<String>,
    #[serde(default)]
    few_shot: Vec<FewShotDoc>,
    #[serde(default)]
    terminal: bool,
    #[serde(default)]
    error: bool,
    #[serde(default)]
    next: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FewShotDoc {
    user: String,
    assistant: String,
    #[serde(default)]
    tool_calls: Vec<FewShotCallDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FewShotCallDoc {
    #[serde(default)]
    call_id: Option<String>,
    name: String,
    #[serde(default)]
    arguments: serde_json::Map<String, serde_json::Value>,
}

/// Parses and validates a workflow document (TOML) against the tool
/// registry. All structural invariants are checked here so later stages can
/// assume a well-formed machine.
pub fn load_workflow_spec(
    document: &str,
    registry: &ToolRegistry,
) -> Result<WorkflowSpec, WorkflowError> {
    let doc: FlowDoc =
        toml::from_str(document).map_err(|e| WorkflowError::Schema(e.to_string()))?;
    if doc.states.is_empty() {
        return Err(WorkflowError::Schema("workflow declares no states".into()));
    }

    let mut states = Vec::new();
    let mut transitions = BTreeMap::new();
    let mut names = BTreeSet::new();
    let mut error_state = None;
    for s in &doc.states {
        if !valid_state_name(&s.name) {
            return Err(WorkflowError::Schema(format!(
                "state name {:?} is not a valid identifier",
                s.name
            )));
        }
        if !names.insert(s.name.clone()) {
            return Err(WorkflowError::Schema(format!("state {:?} declared twice", s.name)));
        }
        if s.error {
            if let Some(prev) = &error_state {
                return Err(WorkflowError::Schema(format!(
                    "states {prev:?} and {:?} both marked as error state",
                    s.name
                )));
            }
            error_state = Some(s.name.clone());
        }
        for tool in &s.tools {
            if !registry.contains(tool) {
                return Err(WorkflowError::UnknownTool {
                    state: s.name.clone(),
                    tool: tool.clone(),
                });
            }
        }
        let mut few_shot = Vec::new();
        for (i, fs) in s.few_shot.iter().enumerate() {
            let calls = fs
                .tool_calls
                .iter()
                .enumerate()
                .map(|(j, c)| ToolCall {
                    call_id: c.call_id.clone().unwrap_or_else(|| format!("fs-{i}-{j}")),
                    name: c.name.clone(),
                    arguments: c.arguments.clone(),
                })
                .collect();
            few_shot.push(FewShotExample {
                user: fs.user.clone(),
                assistant: fs.assistant.clone(),
                tool_calls: calls,
            });
        }
        states.push(StateSpec {
            name: s.name.clone(),
            instructions: s.instructions.clone(),
            allowed_tools: s.tools.clone(),
            few_shot,
            is_terminal: s.terminal,
            is_error: s.error,
        });
        transitions.insert(s.name.clone(), s.next.clone());
    }

    if !names.contains(&doc.initial) {
        return Err(WorkflowError::Graph(format!(
            "initial state {:?} is not declared",
            doc.initial
        )));
    }
    for s in &doc.states {
        for succ in &s.next {
            if !names.contains(succ) {
                return Err(WorkflowError::Graph(format!(
                    "state {:?} lists unknown successor {succ:?}",
                    s.name
                )));
            }
        }
        if s.terminal && !s.next.is_empty() {
            return Err(WorkflowError::Graph(format!(
                "terminal state {:?} lists successors {:?}",
                s.name, s.next
            )));
        }
        if !s.terminal && s.next.is_empty() {
            return Err(WorkflowError::Graph(format!(
                "non-terminal state {:?} has no outgoing transition",
                s.name
            )));
        }
    }
    for r in &doc.intents {
        if !names.contains(&r.entry) {
            return Err(WorkflowError::Graph(format!(
                "intent {:?} routes to unknown state {:?}",
                r.intent, r.entry
            )));
        }
    }

    // Reachability from the initial state, counting intent-route entries and
    // the implicit edge into the error state.
    let mut reachable: BTreeSet<&str> = BTreeSet::new();
    let mut stack: Vec<&str> = vec![doc.initial.as_str()];
    stack.extend(doc.intents.iter().map(|r| r.entry.as_str()));
    if let Some(err) = &error_state {
        stack.push(err.as_str());
    }
    while let Some(s) = stack.pop() {
        if reachable.insert(s) {
            if let Some(succs) = transitions.get(s) {
                stack.extend(succs.iter().map(|x| x.as_str()));
            }
        }
    }
    for name in &names {
        if !reachable.contains(name.as_str()) {
            return Err(WorkflowError::Graph(format!("state {name:?} is unreachable")));
        }
    }

    Ok(WorkflowSpec {
        name: doc.name,
        preamble: doc.preamble,
        initial: doc.initial,
        states,
        transitions,
        intent_routes: doc.intents.into_iter().map(|r| (r.intent, r.entry)).collect(),
        error_state,
    })
}

impl WorkflowSpec {
    pub fn states(&self) -> &[StateSpec] {
        &self.states
    }

    pub fn state(&self, name: &str) -> Option<&StateSpec> {
        self.states.iter().find(|s| s.name == name)
    }

    pub fn state_names(&self) -> Vec<&str> {
        self.states.iter().map(|s| s.name.as_str()).collect()
    }

    /// Declared successors, not counting implicit self-loop / error edges.
    pub fn successors(&self, name: &str) -> &[String] {
        self.transitions.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn error_state(&self) -> Option<&str> {
        self.error_state.as_deref()
    }

    pub fn is_intent_routed(&self) -> bool {
        !self.intent_routes.is_empty()
    }

    pub fn route_for(&self, intent: &str) -> Option<&str> {
        self.intent_routes
            .iter()
            .find(|(i, _)| i == intent)
            .map(|(_, entry)| entry.as_str())
    }

    /// Fallback route when intent resolution fails: the `Vision` route when
    /// declared, otherwise the first declared route.
    pub fn default_route(&self) -> Option<&(String, String)> {
        self.intent_routes
            .iter()
            .find(|(i, _)| i == "Vision")
            .or_else(|| self.intent_routes.first())
    }

    pub fn intent_names(&self) -> Vec<&str> {
        self.intent_routes.iter().map(|(i, _)| i.as_str()).collect()
    }
}

/// A parsed `CURRENT_STAGE` / `USER_INTENT` tag with its byte span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTag {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

fn last_tag(text: &str, re: &Regex) -> Option<ParsedTag> {
    re.captures_iter(text).last().map(|cap| {
        let whole = cap.get(0).unwrap();
        ParsedTag {
            name: cap.get(1).unwrap().as_str().to_string(),
            start: whole.start(),
            end: whole.end(),
        }
    })
}

/// Extracts the last `CURRENT_STAGE = Name` tag, if any. The keyword is
/// case-sensitive and the name is an identifier, so trailing punctuation is
/// not captured.
pub fn parse_stage(text: &str) -> Option<ParsedTag> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"CURRENT_STAGE[ \t]*=[ \t]*([A-Za-z][A-Za-z0-9_]*)").unwrap()
    });
    last_tag(text, re)
}

/// Extracts the last `USER_INTENT = Name` tag, if any.
pub fn parse_intent(text: &str) -> Option<ParsedTag> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE
        .get_or_init(|| Regex::new(r"USER_INTENT[ \t]*=[ \t]*([A-Za-z][A-Za-z0-9_]*)").unwrap());
    last_tag(text, re)
}

/// How [`validate_transition`] treats invalid proposals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransitionMode {
    /// Invalid proposals keep the machine where it is.
    #[default]
    Clamp,
    /// Invalid proposals are rejected outright.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransitionDecision {
    Accept,
    Clamp { to: String, reason: String },
    Reject { reason: String },
}

/// Decides whether the machine may move from `current` to `proposed`.
/// Accepted exactly when `proposed` is a declared successor, the current
/// state itself, or the error state.
pub fn validate_transition(
    spec: &WorkflowSpec,
    current: &str,
    proposed: &str,
    mode: TransitionMode,
) -> Result<TransitionDecision, WorkflowError> {
    if spec.state(current).is_none() {
        return Err(WorkflowError::UnknownCurrentState(current.to_string()));
    }
    let allowed = proposed == current
        || spec.successors(current).iter().any(|s| s == proposed)
        || spec.error_state() == Some(proposed);
    if allowed {
        return Ok(TransitionDecision::Accept);
    }
    let reason = if spec.state(proposed).is_none() {
        format!("proposed stage {proposed:?} is not a workflow state")
    } else {
        format!("transition {current:?} -> {proposed:?} is not declared")
    };
    Ok(match mode {
        TransitionMode::Clamp => TransitionDecision::Clamp { to: current.to_string(), reason },
        TransitionMode::Strict => TransitionDecision::Reject { reason },
    })
}

/// Tool definitions offered in `state`: the state's declared tools in spec
/// order, plus [`FINAL_ANSWER`] which is always available.
pub fn tools_for_state(
    spec: &WorkflowSpec,
    state: &str,
    registry: &ToolRegistry,
) -> Result<Vec<ToolDefinition>, WorkflowError> {
    let st = spec
        .state(state)
        .ok_or_else(|| WorkflowError::UnknownState(state.to_string()))?;
    let mut out = Vec::with_capacity(st.allowed_tools.len() + 1);
    for name in &st.allowed_tools {
        let def = registry.get(name).ok_or_else(|| WorkflowError::UnknownTool {
            state: state.to_string(),
            tool: name.clone(),
        })?;
        out.push(def.clone());
    }
    if !st.allowed_tools.iter().any(|t| t == FINAL_ANSWER) {
        let def = registry.get(FINAL_ANSWER).ok_or_else(|| WorkflowError::UnknownTool {
            state: state.to_string(),
            tool: FINAL_ANSWER.to_string(),
        })?;
        out.push(def.clone());
    }
    Ok(out)
}

/// True when the declared transition relation, restricted to non-error
/// states and with self-loops removed, has no cycle.
pub fn acyclic_ignoring_self_loops(spec: &WorkflowSpec) -> bool {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        White,
        Grey,
        Black,
    }
    let names: Vec<&str> = spec
        .states()
        .iter()
        .filter(|s| !s.is_error)
        .map(|s| s.name.as_str())
        .collect();
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let adjacency: Vec<Vec<usize>> = names
        .iter()
        .map(|n| {
            spec.successors(n)
                .iter()
                .filter(|s| s.as_str() != *n)
                .filter_map(|s| index.get(s.as_str()).copied())
                .collect()
        })
        .collect();

    fn visit(node: usize, adjacency: &[Vec<usize>], marks: &mut [Mark]) -> bool {
        match marks[node] {
            Mark::Black => return true,
            Mark::Grey => return false,
            Mark::White => {}
        }
        marks[node] = Mark::Grey;
        for &succ in &adjacency[node] {
            if !visit(succ, adjacency, marks) {
                return false;
            }
        }
        marks[node] = Mark::Black;
        true
    }

    let mut marks = vec![Mark::White; names.len()];
    (0..names.len()).all(|i| visit(i, &adjacency, &mut marks))
}

/// Workflow documents compiled into the library.
pub mod bundled {
    pub const EO_SINGLE: &str = include_str!("../fixtures/flows/eo_single.flow");
    pub const EO_MULTI: &str = include_str!("../fixtures/flows/eo_multi.flow");
    pub const QUAKE_CASE: &str = include_str!("../fixtures/flows/quake_case.flow");

    /// Looks a bundled workflow up by its short name.
    pub fn by_name(name: &str) -> Option<&'static str> {
        match name {
            "eo_single" => Some(EO_SINGLE),
            "eo_multi" => Some(EO_MULTI),
            "quake_case" => Some(QUAKE_CASE),
            _ => None,
        }
    }

    pub const NAMES: [&str; 3] = ["eo_single", "eo_multi", "quake_case"];
}
