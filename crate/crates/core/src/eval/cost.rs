//! Dollar cost of a run: metered API token rates or amortized local
//! hardware time. All rates come from a user-editable pricing file; nothing
//! is hardcoded.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::RunRecord;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("no pricing entry for model {0:?}")]
    UnknownModelPricing(String),
    #[error("pricing file has no [local] section but a local cost was requested")]
    MissingLocalPricing,
    #[error("invalid pricing: {0}")]
    Invalid(String),
    #[error("reading pricing file: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing pricing file: {0}")]
    Parse(#[from] Box<toml::de::Error>),
}

/// Per-model rates in currency per 10^6 tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelRates {
    pub input: f64,
    #[serde(default)]
    pub cached: f64,
    pub output: f64,
}

/// Amortized local hardware pricing: an hourly rate split across the number
/// of model instances the hardware can serve concurrently.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalRates {
    pub hourly_rate: f64,
    pub capacity: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PricingTable {
    #[serde(default)]
    pub models: BTreeMap<String, ModelRates>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local: Option<LocalRates>,
}

impl PricingTable {
    pub fn validate(&self) -> Result<(), CostError> {
        for (name, r) in &self.models {
            for (label, rate) in [("input", r.input), ("cached", r.cached), ("output", r.output)]
            {
                if !rate.is_finite() || rate < 0.0 {
                    return Err(CostError::Invalid(format!(
                        "model {name:?} {label} rate {rate} is not a nonnegative number"
                    )));
                }
            }
        }
        if let Some(local) = &self.local {
            if !local.hourly_rate.is_finite() || local.hourly_rate < 0.0 {
                return Err(CostError::Invalid(format!(
                    "local hourly_rate {} is not a nonnegative number",
                    local.hourly_rate
                )));
            }
            if local.capacity == 0 {
                return Err(CostError::Invalid("local capacity must be at least 1".into()));
            }
        }
        Ok(())
    }
}

pub fn parse_pricing(text: &str) -> Result<PricingTable, CostError> {
    let table: PricingTable = toml::from_str(text).map_err(Box::new)?;
    table.validate()?;
    Ok(table)
}

pub fn load_pricing(path: impl AsRef<Path>) -> Result<PricingTable, CostError> {
    parse_pricing(&std::fs::read_to_string(path)?)
}

/// Rate card compiled into the library so benches work without a pricing
/// file on disk.
pub mod bundled_pricing {
    pub const REFERENCE: &str = include_str!("../../fixtures/pricing/pricing.toml");
}

/// The bundled reference rate card, parsed.
pub fn default_pricing() -> PricingTable {
    parse_pricing(bundled_pricing::REFERENCE).expect("bundled pricing parses")
}

/// How a run is billed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "basis", rename_all = "snake_case")]
pub enum CostBasis {
    /// Metered tokens at the named model's rates.
    Api { model: String },
    /// Wall time on amortized local hardware.
    Local,
}

/// Cost of one run. API: input*r_in + cached*r_cached + output*r_out with
/// counts scaled by 10^-6. Local: (hourly_rate / capacity) * (wall / 3600).
pub fn compute_cost(
    run: &RunRecord,
    pricing: &PricingTable,
    basis: &CostBasis,
) -> Result<f64, CostError> {
    match basis {
        CostBasis::Api { model } => {
            let rates = pricing
                .models
                .get(model)
                .ok_or_else(|| CostError::UnknownModelPricing(model.clone()))?;
            let t = &run.token_totals;
            Ok((t.input_tokens as f64 * rates.input
                + t.cached_tokens as f64 * rates.cached
                + t.output_tokens as f64 * rates.output)
                * 1e-6)
        }
        CostBasis::Local => {
            let local = pricing.local.as_ref().ok_or(CostError::MissingLocalPricing)?;
            Ok(local.hourly_rate / f64::from(local.capacity) * (run.wall_seconds / 3600.0))
        }
    }
}
