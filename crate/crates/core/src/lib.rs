//! Engine for running tool-calling language-model agents as explicit state
//! machines over Earth-observation style workflows.
//!
//! The crate is organized as a pipeline:
//!
//! * [`ledger`] — typed chat history, tool definitions, token accounting
//! * [`workflow`] — state machine specs, stage tags, transition validation
//! * [`backends`] — OpenAI-compatible / Ollama / replay chat backends
//! * [`sandbox`] — deterministic synthetic EO catalog and tool suite
//! * [`agent`] — the turn loop: gating, error reflection, terminate checks
//! * [`eval`] — trajectory matching, success metrics, cost model, reports
//! * [`taskgen`] — templated task bundles with brute-force gold answers
//! * [`harness`] — bench orchestration and replay script synthesis

pub mod agent;
pub mod backends;
pub mod eval;
pub mod harness;
pub mod ledger;
pub mod rng;
pub mod sandbox;
pub mod taskgen;
pub mod workflow;

pub use agent::{AgentConfig, AgentMode, RunRecord, RunStatus, TurnRecord};
pub use backends::{BackendConfig, BackendError, BackendKind, ChatExchange, ReplayScript, ToolMode};
pub use ledger::{
    ChatMessage, Ledger, LedgerError, ParamKind, ParamSpec, Role, TokenTotals, ToolCall,
    ToolDefinition, ToolRegistry, ToolResult, ToolStatus, UsageRecord,
};
pub use sandbox::{CatalogImage, FaultPlan, Handle, HandleKind, World};
pub use taskgen::{CallMatcher, GoldAnswer, TaskSpec};
pub use workflow::{StateSpec, TransitionDecision, TransitionMode, WorkflowError, WorkflowSpec};
