//! Scoring and reporting: trajectory alignment, task success, EO error,
//! detection matching, the cost model, the tool-gating simulation, and the
//! aggregate benchmark report.

pub mod cost;
pub mod gating;
pub mod metrics;
pub mod report;
pub mod trajectory;

pub use cost::{
    compute_cost, default_pricing, load_pricing, parse_pricing, CostBasis, CostError, LocalRates,
    ModelRates, PricingTable,
};
pub use gating::{simulate_gating_policy, GatingSimulation};
pub use metrics::{
    detection_metrics, eo_error, success_check, DetectionScore, MISSING_PREDICTION_EPSILON,
};
pub use report::{aggregate_report, render_report, MetricsReport, TaskRow};
pub use trajectory::{match_trajectory, TrajectoryMatch};
