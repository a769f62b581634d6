//! Aggregation of per-run records into the benchmark report.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{RunRecord, RunStatus};
use crate::ledger::{ToolCall, ToolStatus};
use crate::taskgen::{artifact_detection_ids, GoldAnswer, TaskSpec};

use super::cost::{compute_cost, CostBasis, PricingTable};
use super::metrics::{eo_error, success_check, MISSING_PREDICTION_EPSILON};
use super::trajectory::match_trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task_id: String,
    pub status: String,
    pub success: bool,
    /// Trajectory correctness fraction in [0, 1].
    pub correctness: f64,
    /// Relative EO error for numeric-gold tasks; capped at 1.0 (and
    /// flagged) when no numeric answer was produced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub epsilon_flagged: bool,
    /// Detection-id recall/F1 for detection-set tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_f1: Option<f64>,
    pub tokens: u64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percent of tasks fully completed with a correct final outcome.
    pub success_rate: f64,
    /// Mean trajectory correctness, percent.
    pub correctness_rate: f64,
    /// Mean EO error percent per domain, keyed agro/climate/urban/forest.
    pub per_domain_eps: BTreeMap<String, f64>,
    /// Mean detection-id recall percent over detection-set tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vision_recall: Option<f64>,
    /// Mean detection-id F1 percent over detection-set tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_f1: Option<f64>,
    /// Mean total tokens per task, thousands.
    pub avg_tokens_k: f64,
    pub total_cost: f64,
    pub per_task: Vec<TaskRow>,
}

/// Executed calls that actually succeeded; failed attempts are retries,
/// not trajectory steps.
fn ok_calls(run: &RunRecord) -> Vec<ToolCall> {
    run.trajectory
        .iter()
        .filter(|c| c.status == ToolStatus::Ok)
        .map(|c| c.call.clone())
        .collect()
}

fn status_label(status: &RunStatus) -> &'static str {
    match status {
        RunStatus::Completed => "completed",
        RunStatus::MaxTurnsExhausted => "max_turns_exhausted",
        RunStatus::Aborted { .. } => "aborted",
    }
}

/// Report-layer domain key for a task's gold intent. Vision tasks are
/// scored by detection recall instead of an epsilon column.
fn domain_key(intent: &str) -> Option<&'static str> {
    match intent {
        "Agriculture" => Some("agro"),
        "Climate" => Some("climate"),
        "Urban" => Some("urban"),
        "Forest" => Some("forest"),
        _ => None,
    }
}

/// Detection-id overlap scores for one run against a gold id list, read
/// from the rendered artifacts.
fn id_set_scores(run: &RunRecord, gold_ids: &[String], artifact_dir: &Path) -> (f64, f64) {
    let mut predicted = std::collections::BTreeSet::new();
    for name in &run.artifacts {
        if let Ok(ids) = artifact_detection_ids(artifact_dir.join(name)) {
            predicted.extend(ids);
        }
    }
    if gold_ids.is_empty() && predicted.is_empty() {
        return (1.0, 1.0);
    }
    if gold_ids.is_empty() || predicted.is_empty() {
        return (0.0, 0.0);
    }
    let tp = gold_ids.iter().filter(|id| predicted.contains(*id)).count() as f64;
    let precision = tp / predicted.len() as f64;
    let recall = tp / gold_ids.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (recall, f1)
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Folds per-run records into the aggregate report. Rows are sorted by
/// task id so the output is independent of run completion order. Cost per
/// run prefers the recorded `cost_usd`, falling back to `pricing`/`basis`.
pub fn aggregate_report(
    runs: &[RunRecord],
    tasks: &[TaskSpec],
    pricing: &PricingTable,
    basis: &CostBasis,
    artifact_dir: &Path,
) -> MetricsReport {
    let by_id: BTreeMap<&str, &TaskSpec> =
        tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    let mut ordered: Vec<&RunRecord> = runs.iter().collect();
    ordered.sort_by(|a, b| a.task_id.cmp(&b.task_id));

    let mut rows = Vec::with_capacity(ordered.len());
    let mut domain_eps: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    let mut recalls = Vec::new();
    let mut f1s = Vec::new();
    for run in ordered {
        let Some(task) = by_id.get(run.task_id.as_str()) else {
            debug_assert!(false, "run {} has no matching task", run.task_id);
            continue;
        };
        let success = success_check(task, run, artifact_dir);
        let correctness =
            match_trajectory(&task.gold_trajectory, &ok_calls(run)).correctness;
        let mut epsilon = None;
        let mut epsilon_flagged = false;
        if let Some(GoldAnswer::Numeric { value, .. }) = &task.gold_answer {
            let (eps, flagged) = match run.final_answer.as_ref().and_then(|a| a.numeric) {
                Some(p) => eo_error(p, *value),
                None => (MISSING_PREDICTION_EPSILON, true),
            };
            epsilon = Some(eps);
            epsilon_flagged = flagged;
            if let Some(key) = task.intent_gold.as_deref().and_then(domain_key) {
                domain_eps.entry(key).or_default().push(eps);
            }
        }
        let mut detection_recall = None;
        let mut detection_f1 = None;
        if let Some(GoldAnswer::Detections { ids }) = &task.gold_answer {
            let (recall, f1) = id_set_scores(run, ids, artifact_dir);
            detection_recall = Some(recall);
            detection_f1 = Some(f1);
            recalls.push(recall);
            f1s.push(f1);
        }
        let cost = match run.cost_usd {
            Some(c) => c,
            None => compute_cost(run, pricing, basis).unwrap_or(0.0),
        };
        rows.push(TaskRow {
            task_id: run.task_id.clone(),
            status: status_label(&run.status).to_string(),
            success,
            correctness,
            epsilon,
            epsilon_flagged,
            detection_recall,
            detection_f1,
            tokens: run.token_totals.total(),
            cost,
        });
    }

    let successes: Vec<f64> =
        rows.iter().map(|r| if r.success { 1.0 } else { 0.0 }).collect();
    let correctnesses: Vec<f64> = rows.iter().map(|r| r.correctness).collect();
    let tokens: Vec<f64> = rows.iter().map(|r| r.tokens as f64).collect();
    MetricsReport {
        success_rate: mean(&successes) * 100.0,
        correctness_rate: mean(&correctnesses) * 100.0,
        per_domain_eps: domain_eps
            .into_iter()
            .map(|(k, v)| (k.to_string(), mean(&v) * 100.0))
            .collect(),
        vision_recall: if recalls.is_empty() { None } else { Some(mean(&recalls) * 100.0) },
        detection_f1: if f1s.is_empty() { None } else { Some(mean(&f1s) * 100.0) },
        avg_tokens_k: mean(&tokens) / 1000.0,
        total_cost: rows.iter().map(|r| r.cost).sum(),
        per_task: rows,
    }
}

/// Plain-text rendering: summary block plus one row per task.
pub fn render_report(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "tasks {}  correct {:.2}%  success {:.2}%  tokens avg {:.2}k  total cost ${:.4}\n",
        report.per_task.len(),
        report.correctness_rate,
        report.success_rate,
        report.avg_tokens_k,
        report.total_cost,
    ));
    if !report.per_domain_eps.is_empty() {
        let parts: Vec<String> = report
            .per_domain_eps
            .iter()
            .map(|(k, v)| format!("{k} {v:.2}"))
            .collect();
        out.push_str(&format!("domain eps%: {}\n", parts.join(" | ")));
    }
    if let (Some(r), Some(f)) = (report.vision_recall, report.detection_f1) {
        out.push_str(&format!("vision recall% {r:.2}  detection f1% {f:.2}\n"));
    }
    out.push('\n');
    out.push_str(&format!(
        "{:<24} {:<20} {:>4} {:>7} {:>7} {:>8} {:>10}\n",
        "task_id", "status", "ok", "corr%", "eps%", "tokens", "cost"
    ));
    for row in &report.per_task {
        let eps = match row.epsilon {
            Some(e) => format!("{:.2}{}", e * 100.0, if row.epsilon_flagged { "*" } else { "" }),
            None => "-".to_string(),
        };
        out.push_str(&format!(
            "{:<24} {:<20} {:>4} {:>7.1} {:>7} {:>8} {:>10}\n",
            row.task_id,
            row.status,
            if row.success { "yes" } else { "no" },
            row.correctness * 100.0,
            eps,
            row.tokens,
            format!("${:.4}", row.cost),
        ));
    }
    out
}
