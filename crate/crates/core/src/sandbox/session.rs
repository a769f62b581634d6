//! Per-task tool execution: handle table, fault cursor, artifacts, and the
//! answer slot.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    detection_id, next_fault, FaultPlan, Handle, HandleKind, SandboxError, World, AGGREGATES,
    CATEGORIES, PRODUCTS, VARIABLES,
};
use crate::ledger::{ToolCall, ToolRegistry, ToolResult};
use crate::rng::{fnv1a64, SplitMix64};

/// One detected object. `detection_id` is stable across runs so gold
/// detection sets can be compared against rendered artifacts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    pub detection_id: String,
    pub image_id: String,
    pub category: String,
    pub bbox: [f64; 4],
}

/// The recorded final answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub text: String,
    /// Parsed numeric value when the text is a number.
    pub numeric: Option<f64>,
}

/// Tool execution context for one task run.
pub struct SandboxSession<'w> {
    world: &'w World,
    registry: ToolRegistry,
    task_id: String,
    out_dir: PathBuf,
    fault_plan: Option<FaultPlan>,
    call_index: u64,
    faults_injected: Vec<u64>,
    handles: BTreeMap<String, Handle>,
    /// Detection storage keyed by `<handle>/<detection_id>` so repeated
    /// detector runs never alias each other's boxes.
    detections: BTreeMap<String, Detection>,
    next_handle: u32,
    answer: Option<AnswerRecord>,
    artifacts: Vec<String>,
}

impl<'w> SandboxSession<'w> {
    pub fn new(
        world: &'w World,
        task_id: impl Into<String>,
        out_dir: impl Into<PathBuf>,
        fault_plan: Option<FaultPlan>,
    ) -> Self {
        SandboxSession {
            world,
            registry: super::registry(),
            task_id: task_id.into(),
            out_dir: out_dir.into(),
            fault_plan,
            call_index: 0,
            faults_injected: Vec::new(),
            handles: BTreeMap::new(),
            detections: BTreeMap::new(),
            next_handle: 1,
            answer: None,
            artifacts: Vec::new(),
        }
    }

    pub fn answer(&self) -> Option<&AnswerRecord> {
        self.answer.as_ref()
    }

    /// Artifact file names written so far, relative to the output directory.
    pub fn artifacts(&self) -> &[String] {
        &self.artifacts
    }

    /// Call indices at which injected faults fired.
    pub fn faults_injected(&self) -> &[u64] {
        &self.faults_injected
    }

    pub fn calls_executed(&self) -> u64 {
        self.call_index
    }

    pub fn handle(&self, id: &str) -> Option<&Handle> {
        self.handles.get(id)
    }

    /// Executes one tool call. Sandbox failures come back as error-status
    /// results, never as panics: to the agent they are data.
    pub fn execute(&mut self, call: &ToolCall) -> ToolResult {
        let index = self.call_index;
        self.call_index += 1;
        if let Some(plan) = &self.fault_plan {
            if plan.in_scope(&call.name) && next_fault(plan, &self.task_id, index) {
                self.faults_injected.push(index);
                return ToolResult::error(&call.call_id, SandboxError::InjectedFault.to_string());
            }
        }
        match self.dispatch(call) {
            Ok(payload) => ToolResult::ok(&call.call_id, payload.to_string()),
            Err(e) => ToolResult::error(&call.call_id, e.to_string()),
        }
    }

    fn dispatch(&mut self, call: &ToolCall) -> Result<Value, SandboxError> {
        self.check_arguments(call)?;
        match call.name.as_str() {
            "list_products" => Ok(json!({ "products": PRODUCTS })),
            "load_product" => self.load_product(call),
            "filter_spatial" => self.filter_spatial(call),
            "filter_temporal" => self.filter_temporal(call),
            "run_detection" => self.run_detection(call),
            "filter_category" => self.filter_category(call),
            "render_map" => self.render_map(call),
            "query_series" => self.query_series(call),
            "correlate" => self.correlate(call),
            "final_answer" => self.final_answer(call),
            other => Err(SandboxError::InvalidArgument(format!("unknown tool {other:?}"))),
        }
    }

    /// Rejects calls naming arguments the tool does not declare, or missing
    /// required ones. The message lists the declared names so a reflecting
    /// model can fix its spelling.
    fn check_arguments(&self, call: &ToolCall) -> Result<(), SandboxError> {
        let Some(def) = self.registry.get(&call.name) else {
            return Err(SandboxError::InvalidArgument(format!("unknown tool {:?}", call.name)));
        };
        let declared: Vec<&str> = def.parameters.iter().map(|p| p.name.as_str()).collect();
        for key in call.arguments.keys() {
            if !declared.contains(&key.as_str()) {
                return Err(SandboxError::InvalidArgument(format!(
                    "unknown argument {key:?} for {}; expected: {}",
                    call.name,
                    declared.join(", ")
                )));
            }
        }
        for p in &def.parameters {
            if p.required && !call.arguments.contains_key(&p.name) {
                return Err(SandboxError::InvalidArgument(format!(
                    "missing required argument {:?} for {}",
                    p.name, call.name
                )));
            }
        }
        Ok(())
    }

    fn alloc_handle(
        &mut self,
        kind: HandleKind,
        contents: Vec<String>,
        parent: Option<String>,
    ) -> String {
        let id = format!("h{}", self.next_handle);
        self.next_handle += 1;
        self.handles.insert(id.clone(), Handle { handle_id: id.clone(), kind, contents, parent });
        id
    }

    fn get_handle(&self, id: &str, expected: HandleKind) -> Result<&Handle, SandboxError> {
        let handle = self
            .handles
            .get(id)
            .ok_or_else(|| SandboxError::UnknownHandle(id.to_string()))?;
        if handle.kind != expected {
            return Err(SandboxError::KindMismatch {
                handle: id.to_string(),
                got: handle.kind.to_string(),
                expected: expected.to_string(),
            });
        }
        Ok(handle)
    }

    fn set_payload(&self, id: &str, kind: HandleKind, count: usize) -> Value {
        let mut payload = json!({ "handle": id, "kind": kind.to_string(), "count": count });
        if count == 0 {
            payload["warning"] = Value::from("empty result");
        }
        payload
    }

    fn load_product(&mut self, call: &ToolCall) -> Result<Value, SandboxError> {
        let product = str_arg(call, "product")?;
        if !PRODUCTS.contains(&product) {
            return Err(SandboxError::UnknownProduct(product.to_string()));
        }
        let contents: Vec<String> = self
            .world
            .images
            .iter()
            .filter(|i| i.product == product)
            .map(|i| i.image_id.clone())
            .collect();
        let count = contents.len();
        let id = self.alloc_handle(HandleKind::ImageSet, contents, None);
        Ok(self.set_payload(&id, HandleKind::ImageSet, count))
    }

    fn filter_spatial(&mut self, call: &ToolCall) -> Result<Value, SandboxError> {
        let source = str_arg(call, "handle")?.to_string();
        let bbox = match (call.arguments.get("bbox"), call.arguments.get("region")) {
            (Some(_), Some(_)) => {
                return Err(SandboxError::InvalidArgument(
                    "pass either bbox or region, not both".into(),
                ))
            }
            (Some(v), None) => bbox_value(v)?,
            (None, Some(v)) => {
                let name = as_str(v, "region")?;
                self.world
                    .region(name)
                    .ok_or_else(|| {
                        SandboxError::InvalidArgument(format!(
                            "unknown region {name:?}; known regions: {}",
                            self.world
                                .regions
                                .iter()
                                .map(|r| r.name.as_str())
                                .collect::<Vec<_>>()
                                .join(", ")
                        ))
                    })?
                    .bbox
            }
            (None, None) => {
                return Err(SandboxError::InvalidArgument("pass bbox or region".into()))
            }
        };
        let handle = self.get_handle(&source, HandleKind::ImageSet)?;
        let contents: Vec<String> = handle
            .contents
            .iter()
            .filter(|id| {
                self.world.image(id).is_some_and(|img| {
                    img.lon >= bbox[0]
                        && img.lon <= bbox[2]
                        && img.lat >= bbox[1]
                        && img.lat <= bbox[3]
                })
            })
            .cloned()
            .collect();
        let count = contents.len();
        let id = self.alloc_handle(HandleKind::ImageSet, contents, Some(source));
        Ok(self.set_payload(&id, HandleKind::ImageSet, count))
    }

    fn filter_temporal(&mut self, call: &ToolCall) -> Result<Value, SandboxError> {
        let source = str_arg(call, "handle")?.to_string();
        let start = date_arg(call, "start_date")?;
        let end = date_arg(call, "end_date")?;
        if start > end {
            return Err(SandboxError::InvalidArgument(format!(
                "start_date {start} is after end_date {end}"
            )));
        }
        let handle = self.get_handle(&source, HandleKind::ImageSet)?;
        let contents: Vec<String> = handle
            .contents
            .iter()
            .filter(|id| {
                self.world
                    .image(id)
                    .is_some_and(|img| img.timestamp >= start && img.timestamp <= end)
            })
            .cloned()
            .collect();
        let count = contents.len();
        let id = self.alloc_handle(HandleKind::ImageSet, contents, Some(source));
        Ok(self.set_payload(&id, HandleKind::ImageSet, count))
    }

    fn run_detection(&mut self, call: &ToolCall) -> Result<Value, SandboxError> {
        let source = str_arg(call, "handle")?.to_string();
        let drop_rate = opt_number_arg(call, "drop_rate")?.unwrap_or(0.0);
        let jitter = opt_number_arg(call, "jitter")?.unwrap_or(0.0);
        if !(0.0..=1.0).contains(&drop_rate) {
            return Err(SandboxError::InvalidArgument(format!(
                "drop_rate {drop_rate} must lie in [0, 1]"
            )));
        }
        if jitter < 0.0 {
            return Err(SandboxError::InvalidArgument(format!(
                "jitter {jitter} must be non-negative"
            )));
        }
        let handle = self.get_handle(&source, HandleKind::ImageSet)?;
        let image_ids = handle.contents.clone();

        let id = self.alloc_handle(HandleKind::DetectionSet, Vec::new(), Some(source));
        let mut contents = Vec::new();
        for image_id in &image_ids {
            let Some(img) = self.world.image(image_id) else { continue };
            for (k, obj) in img.objects.iter().enumerate() {
                // Noise is a pure function of (image, object, noise args):
                // zero noise reproduces the annotations exactly.
                let mut rng = SplitMix64::new(
                    fnv1a64(image_id.as_bytes())
                        ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        ^ drop_rate.to_bits()
                        ^ jitter.to_bits().rotate_left(17),
                );
                if drop_rate > 0.0 && rng.next_f64() < drop_rate {
                    continue;
                }
                let mut bbox = obj.bbox;
                if jitter > 0.0 {
                    for v in bbox.iter_mut() {
                        *v = (*v + rng.next_range_f64(-jitter, jitter)).clamp(0.0, 1.0);
                    }
                    if bbox[0] > bbox[2] {
                        bbox.swap(0, 2);
                    }
                    if bbox[1] > bbox[3] {
                        bbox.swap(1, 3);
                    }
                }
                let det_id = detection_id(image_id, k);
                let store_key = format!("{id}/{det_id}");
                self.detections.insert(
                    store_key.clone(),
                    Detection {
                        detection_id: det_id,
                        image_id: image_id.clone(),
                        category: obj.category.clone(),
                        bbox,
                    },
                );
                contents.push(store_key);
            }
        }
        let count = contents.len();
        self.handles.get_mut(&id).expect("just allocated").contents = contents;
        Ok(self.set_payload(&id, HandleKind::DetectionSet, count))
    }

    fn filter_category(&mut self, call: &ToolCall) -> Result<Value, SandboxError> {
        let source = str_arg(call, "handle")?.to_string();
        let category = str_arg(call, "category")?.to_string();
        if !CATEGORIES.contains(&category.as_str()) {
            return Err(SandboxError::InvalidArgument(format!(
                "unknown category {category:?}; expected one of: {}",
                CATEGORIES.join(", ")
            )));
        }
        let handle = self.get_handle(&source, HandleKind::DetectionSet)?;
        let contents: Vec<String> = handle
            .contents
            .iter()
            .filter(|key| self.detections.get(*key).is_some_and(|d| d.category == category))
            .cloned()
            .collect();
        let count = contents.len();
        let id = self.alloc_handle(HandleKind::DetectionSet, contents, Some(source));
        Ok(self.set_payload(&id, HandleKind::DetectionSet, count))
    }

    fn detections_of(&self, handle: &Handle) -> Vec<&Detection> {
        handle.contents.iter().filter_map(|key| self.detections.get(key)).collect()
    }

    fn render_map(&mut self, call: &ToolCall) -> Result<Value, SandboxError> {
        let source = str_arg(call, "handle")?.to_string();
        let file_name = match call.arguments.get("out_path") {
            Some(v) => {
                let requested = as_str(v, "out_path")?;
                Path::new(requested)
                    .file_name()
                    .and_then(|n| n.to_str())
                    .map(String::from)
                    .ok_or_else(|| {
                        SandboxError::InvalidArgument(format!("bad out_path {requested:?}"))
                    })?
            }
            None => format!("{}_map.geojson", self.task_id),
        };
        let handle = self.get_handle(&source, HandleKind::DetectionSet)?;
        let features: Vec<Feature> = self
            .detections_of(handle)
            .into_iter()
            .map(|det| {
                let img = self.world.image(&det.image_id);
                Feature {
                    kind: "Feature",
                    geometry: Geometry {
                        kind: "Point",
                        coordinates: img.map(|i| [i.lon, i.lat]).unwrap_or([0.0, 0.0]),
                    },
                    properties: FeatureProps {
                        detection_id: det.detection_id.clone(),
                        image_id: det.image_id.clone(),
                        category: det.category.clone(),
                        bbox: det.bbox,
                    },
                }
            })
            .collect();
        let count = features.len();
        let collection = FeatureCollection { kind: "FeatureCollection", features };
        std::fs::create_dir_all(&self.out_dir)?;
        let mut text = serde_json::to_string_pretty(&collection).expect("geojson serializes");
        text.push('\n');
        std::fs::write(self.out_dir.join(&file_name), text)?;
        self.artifacts.push(file_name.clone());
        let mut payload = json!({ "artifact": file_name, "features": count });
        if count == 0 {
            payload["warning"] = Value::from("empty result");
        }
        Ok(payload)
    }

    fn query_series(&mut self, call: &ToolCall) -> Result<Value, SandboxError> {
        let region = str_arg(call, "region")?;
        if self.world.region(region).is_none() {
            return Err(SandboxError::InvalidArgument(format!(
                "unknown region {region:?}; known regions: {}",
                self.world.regions.iter().map(|r| r.name.as_str()).collect::<Vec<_>>().join(", ")
            )));
        }
        let variable = str_arg(call, "variable")?;
        if !VARIABLES.contains(&variable) {
            return Err(SandboxError::InvalidArgument(format!(
                "unknown variable {variable:?}; expected one of: {}",
                VARIABLES.join(", ")
            )));
        }
        let aggregate = str_arg(call, "aggregate")?;
        if !AGGREGATES.contains(&aggregate) {
            return Err(SandboxError::InvalidArgument(format!(
                "unknown aggregate {aggregate:?}; expected one of: {}",
                AGGREGATES.join(", ")
            )));
        }
        let start = date_arg(call, "start_date")?;
        let end = date_arg(call, "end_date")?;
        if start > end {
            return Err(SandboxError::InvalidArgument(format!(
                "start_date {start} is after end_date {end}"
            )));
        }
        let values: Vec<f64> = self
            .world
            .series
            .iter()
            .filter(|r| {
                r.region == region && r.variable == variable && r.date >= start && r.date <= end
            })
            .map(|r| r.value)
            .collect();
        if values.is_empty() {
            return Ok(json!({ "value": Value::Null, "count": 0, "warning": "empty result" }));
        }
        let value = match aggregate {
            "mean" => values.iter().sum::<f64>() / values.len() as f64,
            "sum" => values.iter().sum::<f64>(),
            "min" => values.iter().cloned().fold(f64::INFINITY, f64::min),
            "max" => values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            _ => unreachable!(),
        };
        Ok(json!({ "value": value, "count": values.len() }))
    }

    fn correlate(&mut self, call: &ToolCall) -> Result<Value, SandboxError> {
        let source = str_arg(call, "damage_handle")?.to_string();
        let variable = match call.arguments.get("population_variable") {
            Some(v) => as_str(v, "population_variable")?.to_string(),
            None => "population".to_string(),
        };
        if !VARIABLES.contains(&variable.as_str()) {
            return Err(SandboxError::InvalidArgument(format!(
                "unknown variable {variable:?}; expected one of: {}",
                VARIABLES.join(", ")
            )));
        }
        let handle = self.get_handle(&source, HandleKind::DetectionSet)?;
        let mut sum = 0.0;
        let mut matched = 0usize;
        for det in self.detections_of(handle) {
            let Some(img) = self.world.image(&det.image_id) else { continue };
            let Some(region) = self.world.region_containing(img.lon, img.lat) else { continue };
            if let Some(value) = self.world.series_value(&region.name, img.timestamp, &variable) {
                sum += value;
                matched += 1;
            }
        }
        let total = handle.contents.len();
        let mut payload = json!({ "value": sum, "detections": total, "matched": matched });
        if total == 0 {
            payload["warning"] = Value::from("empty result");
        }
        Ok(payload)
    }

    fn final_answer(&mut self, call: &ToolCall) -> Result<Value, SandboxError> {
        let value = call.arguments.get("answer").expect("checked required");
        let text = match value {
            Value::String(s) => s.clone(),
            Value::Number(n) => n.to_string(),
            Value::Bool(b) => b.to_string(),
            other => other.to_string(),
        };
        let numeric = text.trim().parse::<f64>().ok();
        self.answer = Some(AnswerRecord { text: text.clone(), numeric });
        Ok(json!({ "recorded": true, "answer": text }))
    }

    #[cfg(test)]
    pub(crate) fn test_insert_handle(&mut self, handle: Handle) {
        self.handles.insert(handle.handle_id.clone(), handle);
    }
}

#[derive(Serialize)]
struct FeatureCollection {
    #[serde(rename = "type")]
    kind: &'static str,
    features: Vec<Feature>,
}

#[derive(Serialize)]
struct Feature {
    #[serde(rename = "type")]
    kind: &'static str,
    geometry: Geometry,
    properties: FeatureProps,
}

#[derive(Serialize)]
struct Geometry {
    #[serde(rename = "type")]
    kind: &'static str,
    coordinates: [f64; 2],
}

#[derive(Serialize)]
struct FeatureProps {
    detection_id: String,
    image_id: String,
    category: String,
    bbox: [f64; 4],
}

fn as_str<'a>(value: &'a Value, name: &str) -> Result<&'a str, SandboxError> {
    value.as_str().ok_or_else(|| {
        SandboxError::InvalidArgument(format!("argument {name:?} must be a string"))
    })
}

fn str_arg<'a>(call: &'a ToolCall, name: &str) -> Result<&'a str, SandboxError> {
    let value = call
        .arguments
        .get(name)
        .ok_or_else(|| SandboxError::InvalidArgument(format!("missing argument {name:?}")))?;
    as_str(value, name)
}

fn number_of(value: &Value, name: &str) -> Result<f64, SandboxError> {
    match value {
        Value::Number(n) => n.as_f64().ok_or_else(|| {
            SandboxError::InvalidArgument(format!("argument {name:?} is not a finite number"))
        }),
        Value::String(s) => s.trim().parse::<f64>().map_err(|_| {
            SandboxError::InvalidArgument(format!("argument {name:?} must be a number"))
        }),
        _ => Err(SandboxError::InvalidArgument(format!("argument {name:?} must be a number"))),
    }
}

fn opt_number_arg(call: &ToolCall, name: &str) -> Result<Option<f64>, SandboxError> {
    call.arguments.get(name).map(|v| number_of(v, name)).transpose()
}

fn date_arg(call: &ToolCall, name: &str) -> Result<NaiveDate, SandboxError> {
    let text = str_arg(call, name)?;
    NaiveDate::parse_from_str(text.trim(), "%Y-%m-%d").map_err(|_| {
        SandboxError::InvalidArgument(format!(
            "argument {name:?} must be an ISO date (YYYY-MM-DD), got {text:?}"
        ))
    })
}

fn bbox_value(value: &Value) -> Result<[f64; 4], SandboxError> {
    let items = value
        .as_array()
        .ok_or_else(|| SandboxError::InvalidArgument("bbox must be an array of 4 numbers".into()))?;
    if items.len() != 4 {
        return Err(SandboxError::InvalidArgument(format!(
            "bbox must have 4 entries, got {}",
            items.len()
        )));
    }
    let mut out = [0.0; 4];
    for (i, item) in items.iter().enumerate() {
        out[i] = number_of(item, "bbox")?;
    }
    if out[0] > out[2] || out[1] > out[3] {
        return Err(SandboxError::InvalidArgument(format!(
            "bbox {out:?} must be [lon_min, lat_min, lon_max, lat_max]"
        )));
    }
    Ok(out)
}
