//! Task-level outcome checks: success, relative EO error, and detection
//! set matching.

use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;

use crate::agent::RunRecord;
use crate::sandbox::Detection;
use crate::taskgen::{artifact_detection_ids, GoldAnswer, TaskSpec};

/// Epsilon assigned in aggregates when a numeric-gold task produced no
/// numeric answer at all.
pub const MISSING_PREDICTION_EPSILON: f64 = 1.0;

/// Whether the run fully completed the task. Intermediate tool errors do
/// not matter; only terminal status and the final outcome do. Detection and
/// artifact answers are checked against the rendered files under
/// `artifact_dir`.
pub fn success_check(task: &TaskSpec, run: &RunRecord, artifact_dir: &Path) -> bool {
    if !run.status.is_completed() {
        return false;
    }
    match &task.gold_answer {
        None => true,
        Some(GoldAnswer::Numeric { value, tolerance }) => {
            let Some(p) = run.final_answer.as_ref().and_then(|a| a.numeric) else {
                return false;
            };
            if *value == 0.0 {
                p == 0.0
            } else {
                ((p - value) / value).abs() <= *tolerance
            }
        }
        Some(GoldAnswer::Detections { ids }) => {
            let gold: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
            run.artifacts.iter().any(|name| {
                artifact_detection_ids(artifact_dir.join(name))
                    .map(|got| gold.iter().all(|id| got.contains(*id)))
                    .unwrap_or(false)
            })
        }
        Some(GoldAnswer::Artifact) => run.artifacts.iter().any(|name| {
            std::fs::read_to_string(artifact_dir.join(name))
                .ok()
                .is_some_and(|text| serde_json::from_str::<serde_json::Value>(&text).is_ok())
        }),
    }
}

/// Relative error against the gold value. When gold is zero the absolute
/// error is returned instead and the result is flagged.
pub fn eo_error(predicted: f64, gold: f64) -> (f64, bool) {
    if gold == 0.0 {
        (predicted.abs(), true)
    } else {
        ((predicted - gold).abs() / gold.abs(), false)
    }
}

/// Precision/recall/F1 over spatial detections. `flagged` marks degenerate
/// inputs (an empty side) where the convention rather than matching decided
/// the score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectionScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub flagged: bool,
}

fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy one-to-one matching by descending IoU, same category required,
/// pairs below `iou_threshold` never match. Both sides empty scores all
/// ones by convention (a correct "nothing present" result); a single empty
/// side scores all zeros. Both conventions are flagged.
pub fn detection_metrics(
    predicted: &[Detection],
    gold: &[Detection],
    iou_threshold: f64,
) -> DetectionScore {
    assert!(iou_threshold > 0.0 && iou_threshold < 1.0, "iou_threshold outside (0, 1)");
    if predicted.is_empty() && gold.is_empty() {
        return DetectionScore { precision: 1.0, recall: 1.0, f1: 1.0, flagged: true };
    }
    if predicted.is_empty() || gold.is_empty() {
        return DetectionScore { precision: 0.0, recall: 0.0, f1: 0.0, flagged: true };
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in predicted.iter().enumerate() {
        for (j, g) in gold.iter().enumerate() {
            if p.category != g.category {
                continue;
            }
            let score = iou(&p.bbox, &g.bbox);
            if score >= iou_threshold {
                pairs.push((score, i, j));
            }
        }
    }
    // Descending IoU; index order breaks exact ties deterministically.
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_pred = vec![false; predicted.len()];
    let mut used_gold = vec![false; gold.len()];
    let mut tp = 0usize;
    for (_, i, j) in pairs {
        if !used_pred[i] && !used_gold[j] {
            used_pred[i] = true;
            used_gold[j] = true;
            tp += 1;
        }
    }
    let precision = tp as f64 / predicted.len() as f64;
    let recall = tp as f64 / gold.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    DetectionScore { precision, recall, f1, flagged: false }
}
