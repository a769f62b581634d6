//! Batch runs over the replay backend: one synthesized script per task,
//! parallel execution, per-task run and transcript files, and an aggregate
//! report. Output is deterministic for a fixed task set, mode, and fault
//! plan regardless of the worker count.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::agent::{run_task, AgentConfig, AgentMode, RunRecord};
use crate::backends::ReplayBackend;
use crate::eval::{
    aggregate_report, compute_cost, render_report, CostBasis, CostError, MetricsReport,
    PricingTable,
};
use crate::ledger::ToolRegistry;
use crate::sandbox::{registry as sandbox_registry, FaultPlan, SandboxSession, World};
use crate::taskgen::TaskSpec;
use crate::workflow::{bundled, load_workflow_spec, tools_for_state, WorkflowSpec};

use super::script::{build_gold_script, ScriptPlan};
use super::HarnessError;

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub mode: AgentMode,
    /// Worker threads for the task loop. Clamped to at least 1.
    pub parallelism: usize,
    pub fault_plan: Option<FaultPlan>,
    pub strict_transitions: bool,
    /// Script a premature TERMINATE into every task after this many gold
    /// calls (clamped per task to keep the interruption before the final
    /// call); modes without terminate validation stop short there.
    pub premature_terminate_after: Option<usize>,
    pub pricing: PricingTable,
    pub basis: CostBasis,
}

impl BenchOptions {
    pub fn new(mode: AgentMode, pricing: PricingTable, basis: CostBasis) -> Self {
        BenchOptions {
            mode,
            parallelism: 1,
            fault_plan: None,
            strict_transitions: false,
            premature_terminate_after: None,
            pricing,
            basis,
        }
    }
}

#[derive(Debug)]
pub struct BenchOutcome {
    pub report: MetricsReport,
    /// Run records sorted by task id.
    pub runs: Vec<RunRecord>,
    /// Tool calls executed outside their stage's tool set; always empty for
    /// gated runs.
    pub gating_violations: Vec<String>,
}

/// Runs every task against its synthesized gold script and writes
/// `{task_id}.run.json`, `{task_id}.transcript.json`, rendered map
/// artifacts, `report.json`, and `report.txt` into `out_dir`.
///
/// Configuration problems (bad pricing, unknown workflows) fail before the
/// output directory is touched.
pub fn run_bench(
    world: &World,
    tasks: &[TaskSpec],
    out_dir: &Path,
    options: &BenchOptions,
) -> Result<BenchOutcome, HarnessError> {
    check_pricing(&options.pricing, &options.basis)?;
    let registry = sandbox_registry();
    let specs = load_specs(tasks.iter().map(|t| t.workflow.as_str()), &registry)?;
    fs::create_dir_all(out_dir)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.parallelism.max(1))
        .build()
        .map_err(|e| HarnessError::Invalid(format!("worker pool: {e}")))?;
    let mut runs = pool.install(|| {
        tasks
            .par_iter()
            .map(|task| run_one(world, &specs, &registry, task, out_dir, options))
            .collect::<Result<Vec<_>, HarnessError>>()
    })?;
    runs.sort_by(|a, b| a.task_id.cmp(&b.task_id));

    let report = aggregate_report(&runs, tasks, &options.pricing, &options.basis, out_dir);
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(out_dir.join("report.json"), json)?;
    fs::write(out_dir.join("report.txt"), render_report(&report))?;

    let gating_violations = audit_gating(&runs, &registry)?;
    Ok(BenchOutcome { report, runs, gating_violations })
}

fn run_one(
    world: &World,
    specs: &BTreeMap<String, WorkflowSpec>,
    registry: &ToolRegistry,
    task: &TaskSpec,
    out_dir: &Path,
    options: &BenchOptions,
) -> Result<RunRecord, HarnessError> {
    let spec = &specs[&task.workflow];
    let mut config = AgentConfig::for_mode(options.mode);
    config.strict_transitions = options.strict_transitions;
    let plan = ScriptPlan {
        fault_plan: options.fault_plan.clone(),
        premature_terminate_after: options
            .premature_terminate_after
            .map(|n| n.min(task.gold_trajectory.len().saturating_sub(2))),
    };
    let script = build_gold_script(world, spec, registry, task, &config, &plan)?;
    let mut backend = ReplayBackend::new(script);
    let mut session =
        SandboxSession::new(world, task.task_id.clone(), out_dir, options.fault_plan.clone());
    let (mut record, ledger) = run_task(
        spec,
        registry,
        &mut session,
        &mut backend,
        &config,
        &task.task_id,
        &task.query,
    )?;
    record.cost_usd = Some(compute_cost(&record, &options.pricing, &options.basis)?);

    let mut run_json = serde_json::to_string_pretty(&record)?;
    run_json.push('\n');
    fs::write(out_dir.join(format!("{}.run.json", task.task_id)), run_json)?;
    let mut transcript = serde_json::to_string_pretty(&ledger)?;
    transcript.push('\n');
    fs::write(out_dir.join(format!("{}.transcript.json", task.task_id)), transcript)?;
    Ok(record)
}

/// Rejects pricing that cannot cover the chosen cost basis, so the failure
/// lands before any run starts.
fn check_pricing(pricing: &PricingTable, basis: &CostBasis) -> Result<(), HarnessError> {
    pricing.validate()?;
    match basis {
        CostBasis::Api { model } => {
            if !pricing.models.contains_key(model) {
                return Err(CostError::UnknownModelPricing(model.clone()).into());
            }
        }
        CostBasis::Local => {
            if pricing.local.is_none() {
                return Err(CostError::MissingLocalPricing.into());
            }
        }
    }
    Ok(())
}

fn load_specs<'a>(
    workflows: impl Iterator<Item = &'a str>,
    registry: &ToolRegistry,
) -> Result<BTreeMap<String, WorkflowSpec>, HarnessError> {
    let mut specs = BTreeMap::new();
    for name in workflows {
        if specs.contains_key(name) {
            continue;
        }
        let text = bundled::by_name(name)
            .ok_or_else(|| HarnessError::Invalid(format!("unknown workflow {name:?}")))?;
        specs.insert(name.to_string(), load_workflow_spec(text, registry)?);
    }
    Ok(specs)
}

/// Scans run trajectories for calls executed outside the tool set of the
/// stage they ran in. Ungated runs record no stage and are skipped.
pub fn audit_gating(
    runs: &[RunRecord],
    registry: &ToolRegistry,
) -> Result<Vec<String>, HarnessError> {
    let specs = load_specs(runs.iter().map(|r| r.workflow.as_str()), registry)?;
    let mut violations = Vec::new();
    for run in runs {
        let spec = &specs[&run.workflow];
        for exec in &run.trajectory {
            let Some(state) = exec.state_before.as_deref() else { continue };
            let allowed = tools_for_state(spec, state, registry)?;
            if !allowed.iter().any(|t| t.name == exec.call.name) {
                violations.push(format!(
                    "task {} turn {}: {} executed in stage {}",
                    run.task_id, exec.turn_index, exec.call.name, state
                ));
            }
        }
    }
    Ok(violations)
}
