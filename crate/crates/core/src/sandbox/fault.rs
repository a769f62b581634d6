//! Deterministic transient-fault injection.
//!
//! Whether the k-th tool call of a task faults is a pure function of
//! (plan seed, task id, call index): replaying a run reproduces the same
//! faults at the same positions regardless of host or scheduling.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::rng::{fnv1a64, SplitMix64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultPlan {
    /// Probability that an in-scope call faults, in `[0, 1]`.
    pub fault_rate: f64,
    pub seed: u64,
    /// Tool names subject to faults. An empty scope disables injection.
    pub scope: BTreeSet<String>,
}

impl FaultPlan {
    pub fn new(fault_rate: f64, seed: u64, scope: impl IntoIterator<Item = String>) -> Self {
        FaultPlan { fault_rate, seed, scope: scope.into_iter().collect() }
    }

    /// Scope covering every sandbox tool except `final_answer`, which must
    /// stay reliable for runs to be able to finish.
    pub fn all_tools(fault_rate: f64, seed: u64) -> Self {
        let scope = crate::sandbox::registry()
            .names()
            .into_iter()
            .filter(|n| *n != crate::workflow::FINAL_ANSWER)
            .map(String::from)
            .collect();
        FaultPlan { fault_rate, seed, scope }
    }

    pub fn in_scope(&self, tool: &str) -> bool {
        self.scope.contains(tool)
    }
}

/// The pure fault decision for call `call_index` of `task_id`.
pub fn next_fault(plan: &FaultPlan, task_id: &str, call_index: u64) -> bool {
    if plan.fault_rate <= 0.0 {
        return false;
    }
    if plan.fault_rate >= 1.0 {
        return true;
    }
    let mix = plan.seed
        ^ fnv1a64(task_id.as_bytes())
        ^ call_index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    SplitMix64::new(mix).next_f64() < plan.fault_rate
}
