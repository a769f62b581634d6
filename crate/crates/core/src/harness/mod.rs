//! Offline benchmark orchestration: replay script synthesis for gold
//! trajectories and batch execution with per-task outputs and an aggregate
//! report.

mod bench;
mod script;

pub use bench::{audit_gating, run_bench, BenchOptions, BenchOutcome};
pub use script::{build_gold_script, ScriptPlan};

use thiserror::Error;

use crate::agent::AgentError;
use crate::eval::CostError;
use crate::workflow::WorkflowError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("harness: {0}")]
    Invalid(String),
    /// A gold trajectory call failed in the sandbox for a reason other than
    /// an injected fault; the task bundle and catalog disagree.
    #[error("gold call {call} for task {task_id} failed: {message}")]
    GoldExecution { task_id: String, call: String, message: String },
    #[error("workflow: {0}")]
    Workflow(#[from] WorkflowError),
    #[error("agent: {0}")]
    Agent(#[from] AgentError),
    #[error("cost: {0}")]
    Cost(#[from] CostError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialize: {0}")]
    Json(#[from] serde_json::Error),
}
