//! Benchmark task generation: templates with slots are instantiated against
//! a generated catalog, gold answers are brute-forced by direct scans, and
//! gold trajectories are derived symbolically from the template skeletons.
//!
//! A trajectory interpreter replays the gold call sequence literally against
//! a fresh sandbox session; producing the gold answer exactly is the
//! end-to-end consistency check for every generated task.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::OnceLock;

use chrono::{Days, NaiveDate};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::ledger::ToolCall;
use crate::rng::{fnv1a64, SplitMix64};
use crate::sandbox::{
    epoch_start, registry, AnswerRecord, CatalogImage, SandboxSession, World, AGGREGATES,
    CATEGORIES, EPOCH_DAYS, PRODUCTS, VARIABLES,
};
use crate::workflow::bundled;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template parse: {0}")]
    Parse(#[from] Box<toml::de::Error>),
    #[error("template {template_id}: {message}")]
    Invalid { template_id: String, message: String },
    #[error("template {template_id}: no viable slot assignment after {attempts} attempts")]
    Exhausted { template_id: String, attempts: u32 },
    #[error(transparent)]
    Slot(#[from] SlotError),
    #[error("gold run for {task_id}: {message}")]
    GoldRun { task_id: String, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialize: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum SlotError {
    #[error("missing slot {0:?}")]
    Missing(String),
    #[error("malformed placeholder {0:?}")]
    Malformed(String),
}

/// Matches one expected tool call: the name must be equal and every required
/// argument must be present and equal up to its tolerance. Extra arguments
/// on the observed call are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallMatcher {
    pub name: String,
    #[serde(default)]
    pub required_args: Map<String, Value>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub arg_tolerances: BTreeMap<String, f64>,
}

impl CallMatcher {
    pub fn new(name: impl Into<String>) -> Self {
        CallMatcher { name: name.into(), required_args: Map::new(), arg_tolerances: BTreeMap::new() }
    }

    pub fn arg(mut self, key: impl Into<String>, value: impl Into<Value>) -> Self {
        self.required_args.insert(key.into(), value.into());
        self
    }

    pub fn tolerance(mut self, key: impl Into<String>, rel: f64) -> Self {
        self.arg_tolerances.insert(key.into(), rel);
        self
    }

    /// Relative tolerance for a parameter: an explicit entry wins, otherwise
    /// coordinate-like parameters get 0.10 and everything else is exact.
    pub fn tolerance_for(&self, param: &str) -> f64 {
        if let Some(t) = self.arg_tolerances.get(param) {
            return *t;
        }
        let p = param.to_ascii_lowercase();
        if p == "bbox" || p.contains("lat") || p.contains("lon") {
            0.10
        } else {
            0.0
        }
    }

    pub fn matches(&self, call: &ToolCall) -> bool {
        if call.name != self.name {
            return false;
        }
        self.required_args.iter().all(|(key, gold)| {
            call.arguments
                .get(key)
                .is_some_and(|got| value_matches(got, gold, self.tolerance_for(key)))
        })
    }
}

fn as_number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    }
}

fn numbers_close(got: f64, gold: f64, tol: f64) -> bool {
    if gold != 0.0 {
        (got - gold).abs() <= tol * gold.abs()
    } else {
        got.abs() <= tol
    }
}

/// Value comparison used by the matcher: numbers (including numeric strings)
/// compare within the relative tolerance, strings compare trimmed and
/// case-folded, arrays compare elementwise.
fn value_matches(got: &Value, gold: &Value, tol: f64) -> bool {
    if let (Some(p), Some(g)) = (as_number(got), as_number(gold)) {
        return numbers_close(p, g, tol);
    }
    match (got, gold) {
        (Value::String(a), Value::String(b)) => {
            a.trim().to_lowercase() == b.trim().to_lowercase()
        }
        (Value::Bool(a), Value::Bool(b)) => a == b,
        (Value::Null, Value::Null) => true,
        (Value::Array(a), Value::Array(b)) => {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| value_matches(x, y, tol))
        }
        (Value::Object(a), Value::Object(b)) => a == b,
        _ => false,
    }
}

/// What counts as a correct final result for a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GoldAnswer {
    /// Numeric answer within a relative tolerance (absolute when the gold
    /// value is zero).
    Numeric {
        value: f64,
        #[serde(default = "default_numeric_tolerance")]
        tolerance: f64,
    },
    /// The rendered map artifact must contain every listed detection id.
    Detections { ids: Vec<String> },
    /// A parseable artifact must have been produced.
    Artifact,
}

fn default_numeric_tolerance() -> f64 {
    0.10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub query: String,
    pub intent_gold: Option<String>,
    pub workflow: String,
    /// Reference to the generation seed this task came from.
    pub scenario: String,
    pub gold_trajectory: Vec<CallMatcher>,
    pub gold_answer: Option<GoldAnswer>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), TemplateError> {
        let fail = |message: String| TemplateError::Invalid {
            template_id: self.task_id.clone(),
            message,
        };
        if self.gold_trajectory.is_empty() {
            return Err(fail("gold trajectory is empty".into()));
        }
        for m in &self.gold_trajectory {
            if m.name.is_empty() {
                return Err(fail("matcher with empty tool name".into()));
            }
            for (k, t) in &m.arg_tolerances {
                if !(0.0..1.0).contains(t) {
                    return Err(fail(format!("tolerance {t} for {k:?} outside [0, 1)")));
                }
            }
        }
        if let Some(GoldAnswer::Numeric { tolerance, .. }) = &self.gold_answer {
            if !(0.0..1.0).contains(tolerance) {
                return Err(fail(format!("answer tolerance {tolerance} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// How a template's gold answer is brute-forced from the catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    /// Count of detections matching the sampled filters.
    DetectionCount,
    /// The detection ids themselves; success inspects the rendered map.
    DetectionIds,
    /// Aggregate of a regional series over the sampled window.
    Series,
    /// Sum of the population series value at each detection.
    Correlate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CallSkeleton {
    pub tool: String,
    #[serde(default)]
    pub args: Map<String, Value>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tolerances: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskTemplate {
    pub template_id: String,
    #[serde(default)]
    pub intent: Option<String>,
    pub workflow: String,
    pub query: String,
    pub answer: AnswerMode,
    /// Sample slots until the gold result is empty instead of non-empty.
    #[serde(default)]
    pub require_empty: bool,
    /// Inclusive [min, max] length in days of sampled date windows.
    #[serde(default = "default_window_days")]
    pub window_days: [u32; 2],
    pub trajectory: Vec<CallSkeleton>,
}

fn default_window_days() -> [u32; 2] {
    [14, 30]
}

const INTENTS: [&str; 5] = ["Vision", "Forest", "Urban", "Climate", "Agriculture"];

fn slot_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").unwrap())
}

/// Slot names referenced in a pattern string.
pub fn slots_in(text: &str) -> BTreeSet<String> {
    slot_re().captures_iter(text).map(|c| c[1].to_string()).collect()
}

fn slots_in_value(value: &Value, out: &mut BTreeSet<String>) {
    match value {
        Value::String(s) => out.extend(slots_in(s)),
        Value::Array(items) => items.iter().for_each(|v| slots_in_value(v, out)),
        Value::Object(map) => map.values().for_each(|v| slots_in_value(v, out)),
        _ => {}
    }
}

impl TaskTemplate {
    fn trajectory_slots(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for skeleton in &self.trajectory {
            for v in skeleton.args.values() {
                slots_in_value(v, &mut out);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        let fail = |message: String| TemplateError::Invalid {
            template_id: self.template_id.clone(),
            message,
        };
        if let Some(intent) = &self.intent {
            if !INTENTS.contains(&intent.as_str()) {
                return Err(fail(format!(
                    "unknown intent {intent:?}; expected one of: {}",
                    INTENTS.join(", ")
                )));
            }
        }
        if !bundled::NAMES.contains(&self.workflow.as_str()) {
            return Err(fail(format!(
                "unknown workflow {:?}; bundled: {}",
                self.workflow,
                bundled::NAMES.join(", ")
            )));
        }
        if self.trajectory.is_empty() {
            return Err(fail("trajectory is empty".into()));
        }
        let reg = registry();
        for skeleton in &self.trajectory {
            if !reg.contains(&skeleton.tool) {
                return Err(fail(format!("unknown tool {:?}", skeleton.tool)));
            }
            for (k, t) in &skeleton.tolerances {
                if !(0.0..1.0).contains(t) {
                    return Err(fail(format!("tolerance {t} for {k:?} outside [0, 1)")));
                }
            }
        }
        let consumed = self.trajectory_slots();
        for slot in slots_in(&self.query) {
            if !consumed.contains(&slot) {
                return Err(fail(format!("query slot {slot:?} never used by the trajectory")));
            }
        }
        if self.window_days[0] == 0 || self.window_days[0] > self.window_days[1] {
            return Err(fail(format!("bad window_days {:?}", self.window_days)));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct TemplatesDoc {
    templates: Vec<TaskTemplate>,
}

/// Parses and validates a templates document.
pub fn load_templates(document: &str) -> Result<Vec<TaskTemplate>, TemplateError> {
    let doc: TemplatesDoc = toml::from_str(document).map_err(Box::new)?;
    let mut seen = BTreeSet::new();
    for t in &doc.templates {
        t.validate()?;
        if !seen.insert(t.template_id.clone()) {
            return Err(TemplateError::Invalid {
                template_id: t.template_id.clone(),
                message: "duplicate template_id".into(),
            });
        }
    }
    Ok(doc.templates)
}

pub mod bundled_templates {
    /// The default benchmark template set.
    pub const EO_BENCH: &str = include_str!("../fixtures/templates/eo_bench.toml");
}

/// The bundled template set, parsed.
pub fn default_templates() -> Vec<TaskTemplate> {
    load_templates(bundled_templates::EO_BENCH).expect("bundled templates are valid")
}

type Slots = BTreeMap<String, Value>;

fn substitute_text(pattern: &str, slots: &Slots) -> Result<String, SlotError> {
    let mut out = String::new();
    let mut last = 0;
    for caps in slot_re().captures_iter(pattern) {
        let whole = caps.get(0).unwrap();
        let name = &caps[1];
        let value = slots.get(name).ok_or_else(|| SlotError::Missing(name.to_string()))?;
        out.push_str(&pattern[last..whole.start()]);
        match value {
            Value::String(s) => out.push_str(s),
            other => out.push_str(&other.to_string()),
        }
        last = whole.end();
    }
    out.push_str(&pattern[last..]);
    Ok(out)
}

fn substitute_value(value: &Value, slots: &Slots) -> Result<Value, SlotError> {
    match value {
        Value::String(s) if s.contains('{') => {
            let names: Vec<String> = slots_in(s).into_iter().collect();
            match names.as_slice() {
                [name] if s == &format!("{{{name}}}") => slots
                    .get(name)
                    .cloned()
                    .ok_or_else(|| SlotError::Missing(name.clone())),
                [] => Err(SlotError::Malformed(s.clone())),
                _ => Ok(Value::String(substitute_text(s, slots)?)),
            }
        }
        Value::Array(items) => Ok(Value::Array(
            items.iter().map(|v| substitute_value(v, slots)).collect::<Result<_, _>>()?,
        )),
        Value::Object(map) => {
            let mut out = Map::new();
            for (k, v) in map {
                out.insert(k.clone(), substitute_value(v, slots)?);
            }
            Ok(Value::Object(out))
        }
        other => Ok(other.clone()),
    }
}

/// Instantiates the template's trajectory pattern with concrete slot values.
pub fn derive_gold_trajectory(
    template: &TaskTemplate,
    slots: &Slots,
) -> Result<Vec<CallMatcher>, SlotError> {
    let mut out = Vec::with_capacity(template.trajectory.len());
    for skeleton in &template.trajectory {
        let mut matcher = CallMatcher::new(&skeleton.tool);
        matcher.arg_tolerances = skeleton.tolerances.clone();
        for (key, value) in &skeleton.args {
            matcher.required_args.insert(key.clone(), substitute_value(value, slots)?);
        }
        out.push(matcher);
    }
    Ok(out)
}

/// Images matching product, optional region bbox, and date window, in
/// catalog order. Mirrors the sandbox filter chain exactly.
fn matching_images<'a>(
    world: &'a World,
    product: &str,
    region: Option<&str>,
    start: NaiveDate,
    end: NaiveDate,
) -> Vec<&'a CatalogImage> {
    let bbox = region.map(|name| world.region(name).expect("sampled region exists").bbox);
    world
        .images
        .iter()
        .filter(|img| img.product == product)
        .filter(|img| {
            bbox.is_none_or(|b| {
                img.lon >= b[0] && img.lon <= b[2] && img.lat >= b[1] && img.lat <= b[3]
            })
        })
        .filter(|img| img.timestamp >= start && img.timestamp <= end)
        .collect()
}

/// Detection ids the sandbox would produce for the given filters, via a
/// direct catalog scan.
fn scan_detection_ids(
    world: &World,
    product: &str,
    region: Option<&str>,
    start: NaiveDate,
    end: NaiveDate,
    category: Option<&str>,
) -> Vec<String> {
    let mut ids = Vec::new();
    for img in matching_images(world, product, region, start, end) {
        for (k, obj) in img.objects.iter().enumerate() {
            if category.is_none_or(|c| obj.category == c) {
                ids.push(crate::sandbox::detection_id(&img.image_id, k));
            }
        }
    }
    ids
}

/// Series values over a window, in the same order the sandbox aggregates
/// them, so fold results are bit-identical.
fn series_window(
    world: &World,
    region: &str,
    variable: &str,
    start: NaiveDate,
    end: NaiveDate,
) -> Vec<f64> {
    world
        .series
        .iter()
        .filter(|r| r.region == region && r.variable == variable && r.date >= start && r.date <= end)
        .map(|r| r.value)
        .collect()
}

fn aggregate_values(values: &[f64], aggregate: &str) -> f64 {
    match aggregate {
        "mean" => values.iter().sum::<f64>() / values.len() as f64,
        "sum" => values.iter().sum::<f64>(),
        "min" => values.iter().cloned().fold(f64::INFINITY, f64::min),
        "max" => values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        other => panic!("unknown aggregate {other:?}"),
    }
}

/// Correlation sum over every detection of the filtered images: the
/// containing region's series value at the image date, summed in catalog
/// order. Returns (sum, detections, matched).
fn correlate_scan(
    world: &World,
    product: &str,
    region: Option<&str>,
    start: NaiveDate,
    end: NaiveDate,
    variable: &str,
) -> (f64, usize, usize) {
    let mut sum = 0.0;
    let mut total = 0usize;
    let mut matched = 0usize;
    for img in matching_images(world, product, region, start, end) {
        for _ in &img.objects {
            total += 1;
            let Some(region) = world.region_containing(img.lon, img.lat) else { continue };
            if let Some(value) = world.series_value(&region.name, img.timestamp, variable) {
                sum += value;
                matched += 1;
            }
        }
    }
    (sum, total, matched)
}

struct GoldComputation {
    answer_slot: Value,
    gold: GoldAnswer,
    viable: bool,
}

/// Substituted arguments of the first trajectory step using `tool`, if any.
fn skeleton_args(
    template: &TaskTemplate,
    slots: &Slots,
    tool: &str,
) -> Result<Option<Map<String, Value>>, SlotError> {
    let Some(skeleton) = template.trajectory.iter().find(|s| s.tool == tool) else {
        return Ok(None);
    };
    let mut out = Map::new();
    for (k, v) in &skeleton.args {
        out.insert(k.clone(), substitute_value(v, slots)?);
    }
    Ok(Some(out))
}

fn opt_str(args: &Option<Map<String, Value>>, key: &str) -> Option<String> {
    args.as_ref()?.get(key)?.as_str().map(String::from)
}

fn need_str(
    args: &Option<Map<String, Value>>,
    key: &str,
    tool: &str,
    template_id: &str,
) -> Result<String, TemplateError> {
    opt_str(args, key).ok_or_else(|| TemplateError::Invalid {
        template_id: template_id.to_string(),
        message: format!("a {tool} step with a string {key:?} argument is required"),
    })
}

fn need_date(
    args: &Option<Map<String, Value>>,
    key: &str,
    tool: &str,
    template_id: &str,
) -> Result<NaiveDate, TemplateError> {
    let text = need_str(args, key, tool, template_id)?;
    NaiveDate::parse_from_str(&text, "%Y-%m-%d").map_err(|e| TemplateError::Invalid {
        template_id: template_id.to_string(),
        message: format!("bad {key} {text:?}: {e}"),
    })
}

/// Brute-forces the gold answer for one slot assignment by scanning the
/// catalog with the parameters the instantiated trajectory would use.
fn compute_gold(
    world: &World,
    template: &TaskTemplate,
    slots: &Slots,
) -> Result<GoldComputation, TemplateError> {
    let id = template.template_id.as_str();
    let load = skeleton_args(template, slots, "load_product")?;
    let spatial = skeleton_args(template, slots, "filter_spatial")?;
    let temporal = skeleton_args(template, slots, "filter_temporal")?;
    let category = skeleton_args(template, slots, "filter_category")?;
    match template.answer {
        AnswerMode::DetectionCount | AnswerMode::DetectionIds => {
            let product = need_str(&load, "product", "load_product", id)?;
            let start = need_date(&temporal, "start_date", "filter_temporal", id)?;
            let end = need_date(&temporal, "end_date", "filter_temporal", id)?;
            let region = opt_str(&spatial, "region");
            let cat = opt_str(&category, "category");
            let ids = scan_detection_ids(
                world,
                &product,
                region.as_deref(),
                start,
                end,
                cat.as_deref(),
            );
            let viable = if template.require_empty { ids.is_empty() } else { !ids.is_empty() };
            let count = ids.len() as u64;
            let gold = match template.answer {
                AnswerMode::DetectionCount => GoldAnswer::Numeric {
                    value: count as f64,
                    tolerance: default_numeric_tolerance(),
                },
                _ => GoldAnswer::Detections { ids },
            };
            Ok(GoldComputation { answer_slot: Value::from(count), gold, viable })
        }
        AnswerMode::Series => {
            let series = skeleton_args(template, slots, "query_series")?;
            let region = need_str(&series, "region", "query_series", id)?;
            let variable = need_str(&series, "variable", "query_series", id)?;
            let aggregate = need_str(&series, "aggregate", "query_series", id)?;
            let start = need_date(&series, "start_date", "query_series", id)?;
            let end = need_date(&series, "end_date", "query_series", id)?;
            let values = series_window(world, &region, &variable, start, end);
            let viable = !values.is_empty() && !template.require_empty;
            let value = if values.is_empty() { 0.0 } else { aggregate_values(&values, &aggregate) };
            Ok(GoldComputation {
                answer_slot: Value::from(value),
                gold: GoldAnswer::Numeric { value, tolerance: default_numeric_tolerance() },
                viable,
            })
        }
        AnswerMode::Correlate => {
            let correlate = skeleton_args(template, slots, "correlate")?;
            let product = need_str(&load, "product", "load_product", id)?;
            let start = need_date(&temporal, "start_date", "filter_temporal", id)?;
            let end = need_date(&temporal, "end_date", "filter_temporal", id)?;
            let region = opt_str(&spatial, "region");
            let variable =
                opt_str(&correlate, "population_variable").unwrap_or_else(|| "population".into());
            let (sum, total, _) =
                correlate_scan(world, &product, region.as_deref(), start, end, &variable);
            Ok(GoldComputation {
                answer_slot: Value::from(sum),
                gold: GoldAnswer::Numeric { value: sum, tolerance: default_numeric_tolerance() },
                viable: total > 0 && !template.require_empty,
            })
        }
    }
}

/// Samples one slot assignment for the template. Dates land inside the
/// catalog epoch; categorical slots come from the catalog itself.
fn sample_slots(world: &World, template: &TaskTemplate, rng: &mut SplitMix64) -> Slots {
    let mut needed = slots_in(&template.query);
    needed.extend(template.trajectory_slots());
    let mut slots = Slots::new();
    if needed.contains("product") {
        let present: Vec<&str> = PRODUCTS
            .iter()
            .copied()
            .filter(|p| world.images.iter().any(|i| &i.product == p))
            .collect();
        let pick = present[rng.next_below(present.len() as u64) as usize];
        slots.insert("product".into(), Value::from(pick));
    }
    if needed.contains("region") {
        let pick = &world.regions[rng.next_below(world.regions.len() as u64) as usize];
        slots.insert("region".into(), Value::from(pick.name.clone()));
    }
    if needed.contains("category") {
        let pick = CATEGORIES[rng.next_below(CATEGORIES.len() as u64) as usize];
        slots.insert("category".into(), Value::from(pick));
    }
    if needed.contains("variable") {
        let pick = VARIABLES[rng.next_below(VARIABLES.len() as u64) as usize];
        slots.insert("variable".into(), Value::from(pick));
    }
    if needed.contains("aggregate") {
        let pick = AGGREGATES[rng.next_below(AGGREGATES.len() as u64) as usize];
        slots.insert("aggregate".into(), Value::from(pick));
    }
    if needed.contains("start_date") || needed.contains("end_date") {
        let [min_len, max_len] = template.window_days;
        let max_len = max_len.min(EPOCH_DAYS);
        let len = min_len + rng.next_below((max_len - min_len + 1) as u64) as u32;
        let day0 = rng.next_below((EPOCH_DAYS - len + 1) as u64) as u32;
        let start = epoch_start() + Days::new(day0 as u64);
        let end = epoch_start() + Days::new((day0 + len - 1) as u64);
        slots.insert("start_date".into(), Value::from(start.to_string()));
        slots.insert("end_date".into(), Value::from(end.to_string()));
    }
    // Literal bindings in skeleton args (variable, aggregate names) are not
    // slots and need no sampling; anything else unknown surfaces later as a
    // SlotError.
    slots
}

const MAX_SAMPLE_ATTEMPTS: u32 = 500;

/// Generates `n_per_template` tasks per template against the catalog. Slot
/// values are sampled from what the catalog actually contains and each
/// task's gold answer is computed by exhaustive scan. Pure in
/// (catalog, templates, n, seed).
pub fn generate_tasks(
    catalog: &World,
    templates: &[TaskTemplate],
    n_per_template: usize,
    seed: u64,
) -> Result<Vec<TaskSpec>, TemplateError> {
    let mut tasks = Vec::with_capacity(templates.len() * n_per_template);
    for template in templates {
        template.validate()?;
        let mut used: BTreeSet<String> = BTreeSet::new();
        for variant in 0..n_per_template {
            let mut rng = SplitMix64::new(
                seed ^ fnv1a64(template.template_id.as_bytes())
                    ^ (variant as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let mut accepted = None;
            for attempt in 0..MAX_SAMPLE_ATTEMPTS {
                let mut slots = sample_slots(catalog, template, &mut rng);
                let key = serde_json::to_string(&slots)?;
                // Prefer unseen slot combinations but settle for repeats
                // once the space looks small.
                if used.contains(&key) && attempt < 64 {
                    continue;
                }
                let computed = compute_gold(catalog, template, &slots)?;
                if !computed.viable {
                    continue;
                }
                used.insert(key);
                slots.insert("answer".into(), computed.answer_slot);
                accepted = Some((slots, computed.gold));
                break;
            }
            let Some((slots, gold)) = accepted else {
                return Err(TemplateError::Exhausted {
                    template_id: template.template_id.clone(),
                    attempts: MAX_SAMPLE_ATTEMPTS,
                });
            };
            let task = TaskSpec {
                task_id: format!("{}-{variant:02}", template.template_id),
                query: substitute_text(&template.query, &slots)?,
                intent_gold: template.intent.clone(),
                workflow: template.workflow.clone(),
                scenario: format!("seed-{seed}"),
                gold_trajectory: derive_gold_trajectory(template, &slots)?,
                gold_answer: Some(gold),
            };
            task.validate()?;
            tasks.push(task);
        }
    }
    Ok(tasks)
}

/// Serializes tasks as line-delimited JSON.
pub fn tasks_to_jsonl(tasks: &[TaskSpec]) -> String {
    let mut out = String::new();
    for task in tasks {
        out.push_str(&serde_json::to_string(task).expect("task serializes"));
        out.push('\n');
    }
    out
}

pub fn tasks_from_jsonl(text: &str) -> Result<Vec<TaskSpec>, TemplateError> {
    let mut tasks = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let task: TaskSpec = serde_json::from_str(line)?;
        task.validate()?;
        tasks.push(task);
    }
    Ok(tasks)
}

pub fn write_tasks(path: impl AsRef<Path>, tasks: &[TaskSpec]) -> Result<(), TemplateError> {
    std::fs::write(path, tasks_to_jsonl(tasks))?;
    Ok(())
}

pub fn load_tasks(path: impl AsRef<Path>) -> Result<Vec<TaskSpec>, TemplateError> {
    tasks_from_jsonl(&std::fs::read_to_string(path)?)
}

/// Result of replaying a gold trajectory literally against the sandbox.
#[derive(Debug, Clone)]
pub struct GoldRunOutcome {
    pub answer: Option<AnswerRecord>,
    pub artifacts: Vec<String>,
    pub calls: Vec<ToolCall>,
}

pub(crate) fn wired_handle_param(tool: &str) -> Option<(&'static str, HandleSlot)> {
    match tool {
        "filter_spatial" | "filter_temporal" | "run_detection" => {
            Some(("handle", HandleSlot::ImageSet))
        }
        "filter_category" | "render_map" => Some(("handle", HandleSlot::DetectionSet)),
        "correlate" => Some(("damage_handle", HandleSlot::DetectionSet)),
        _ => None,
    }
}

#[derive(Clone, Copy, PartialEq)]
pub(crate) enum HandleSlot {
    ImageSet,
    DetectionSet,
}

/// Which handle slot a successful call's output refills, if any.
pub(crate) fn handle_source_slot(tool: &str) -> Option<HandleSlot> {
    match tool {
        "load_product" | "filter_spatial" | "filter_temporal" => Some(HandleSlot::ImageSet),
        "run_detection" | "filter_category" => Some(HandleSlot::DetectionSet),
        _ => None,
    }
}

/// Executes a task's gold trajectory one call at a time, wiring each call's
/// handle argument to the latest handle of the right kind. Any tool error
/// fails the run: gold trajectories must execute cleanly.
pub fn run_gold_trajectory(
    world: &World,
    task: &TaskSpec,
    out_dir: impl AsRef<Path>,
) -> Result<GoldRunOutcome, TemplateError> {
    let mut session = SandboxSession::new(world, task.task_id.clone(), out_dir.as_ref(), None);
    let mut last_image: Option<String> = None;
    let mut last_detection: Option<String> = None;
    let mut calls = Vec::with_capacity(task.gold_trajectory.len());
    let fail = |message: String| TemplateError::GoldRun { task_id: task.task_id.clone(), message };
    for (i, matcher) in task.gold_trajectory.iter().enumerate() {
        let mut call = ToolCall::new(format!("gold-{i}"), &matcher.name);
        call.arguments = matcher.required_args.clone();
        if let Some((param, slot)) = wired_handle_param(&matcher.name) {
            if !call.arguments.contains_key(param) {
                let source = match slot {
                    HandleSlot::ImageSet => last_image.clone(),
                    HandleSlot::DetectionSet => last_detection.clone(),
                };
                let handle = source.ok_or_else(|| {
                    fail(format!("step {i} ({}) has no prior handle to wire", matcher.name))
                })?;
                call.arguments.insert(param.into(), Value::from(handle));
            }
        }
        let result = session.execute(&call);
        if result.is_error() {
            return Err(fail(format!("step {i} ({}) failed: {}", matcher.name, result.payload)));
        }
        if let Ok(payload) = serde_json::from_str::<Value>(&result.payload) {
            if let Some(handle) = payload.get("handle").and_then(Value::as_str) {
                match handle_source_slot(&matcher.name) {
                    Some(HandleSlot::ImageSet) => last_image = Some(handle.to_string()),
                    Some(HandleSlot::DetectionSet) => last_detection = Some(handle.to_string()),
                    None => {}
                }
            }
        }
        calls.push(call);
    }
    Ok(GoldRunOutcome {
        answer: session.answer().cloned(),
        artifacts: session.artifacts().to_vec(),
        calls,
    })
}

/// Reads the detection ids out of a rendered map artifact.
pub fn artifact_detection_ids(path: impl AsRef<Path>) -> Result<BTreeSet<String>, TemplateError> {
    let text = std::fs::read_to_string(path)?;
    let doc: Value = serde_json::from_str(&text)?;
    let mut ids = BTreeSet::new();
    if let Some(features) = doc.get("features").and_then(Value::as_array) {
        for f in features {
            if let Some(id) = f.pointer("/properties/detection_id").and_then(Value::as_str) {
                ids.insert(id.to_string());
            }
        }
    }
    Ok(ids)
}

/// The end-to-end consistency check: replaying the gold trajectory must
/// reproduce the gold answer exactly.
pub fn verify_gold_consistency(
    world: &World,
    task: &TaskSpec,
    out_dir: impl AsRef<Path>,
) -> Result<(), TemplateError> {
    let out_dir = out_dir.as_ref();
    let outcome = run_gold_trajectory(world, task, out_dir)?;
    let fail = |message: String| TemplateError::GoldRun { task_id: task.task_id.clone(), message };
    match &task.gold_answer {
        Some(GoldAnswer::Numeric { value, .. }) => {
            let got = outcome.answer.as_ref().and_then(|a| a.numeric);
            if got != Some(*value) {
                return Err(fail(format!("answer {got:?} != gold {value}")));
            }
        }
        Some(GoldAnswer::Detections { ids }) => {
            let artifact = outcome
                .artifacts
                .last()
                .ok_or_else(|| fail("no artifact rendered".into()))?;
            let found = artifact_detection_ids(out_dir.join(artifact))?;
            let expected: BTreeSet<String> = ids.iter().cloned().collect();
            if found != expected {
                return Err(fail(format!(
                    "artifact ids {found:?} != gold ids {expected:?}"
                )));
            }
        }
        Some(GoldAnswer::Artifact) => {
            let artifact = outcome
                .artifacts
                .last()
                .ok_or_else(|| fail("no artifact rendered".into()))?;
            let text = std::fs::read_to_string(out_dir.join(artifact))?;
            serde_json::from_str::<Value>(&text)?;
        }
        None => {}
    }
    Ok(())
}
