//! Deterministic synthetic Earth-observation world and the tool suite the
//! agent executes against it.
//!
//! A [`World`] is generated from a seed: an image catalog with annotated
//! objects, complete daily measurement series per region, and a region
//! table. Tools run inside a [`SandboxSession`] which owns the handle table,
//! fault injection state, and the task's answer slot. Every tool is a pure
//! function of the world, the handle table, and the fault plan, so replaying
//! a transcript reproduces identical results.

mod fault;
mod generate;
mod session;

pub use fault::{next_fault, FaultPlan};
pub use generate::generate_catalog;
pub use session::{AnswerRecord, Detection, SandboxSession};

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{ParamKind, ParamSpec, ToolDefinition, ToolRegistry};

pub const PRODUCTS: [&str; 3] = ["xview1", "sentinel2", "modis_terra"];
pub const CATEGORIES: [&str; 4] = ["ship", "building", "vehicle", "aircraft"];
pub const VARIABLES: [&str; 7] =
    ["ndvi", "lst", "builtup", "forest_loss", "crop_index", "damage_count", "population"];
pub const AGGREGATES: [&str; 4] = ["mean", "sum", "min", "max"];

/// First day of the generated epoch; series cover `EPOCH_DAYS` from here.
pub fn epoch_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 5, 1).unwrap()
}
pub const EPOCH_DAYS: u32 = 90;

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("unknown product {0:?}")]
    UnknownProduct(String),
    #[error("unknown handle {0:?}")]
    UnknownHandle(String),
    #[error("handle {handle:?} has kind {got}, expected {expected}")]
    KindMismatch { handle: String, got: String, expected: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("transient backend failure")]
    InjectedFault,
    #[error("artifact i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One annotated object in a catalog image. The box is normalized to the
/// image frame: `[x0, y0, x1, y1]` with `x0 < x1`, `y0 < y1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub category: String,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogImage {
    pub image_id: String,
    pub product: String,
    pub lat: f64,
    pub lon: f64,
    pub timestamp: NaiveDate,
    pub objects: Vec<ObjectAnnotation>,
}

/// One measurement row; exactly one row exists per (region, date, variable).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub region: String,
    pub date: NaiveDate,
    pub variable: String,
    pub value: f64,
}

/// Named area; `bbox` is `[lon_min, lat_min, lon_max, lat_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub bbox: [f64; 4],
}

impl Region {
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        lon >= self.bbox[0] && lon <= self.bbox[2] && lat >= self.bbox[1] && lat <= self.bbox[3]
    }
}

/// The full synthetic world a task runs against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub images: Vec<CatalogImage>,
    pub series: Vec<SeriesRow>,
    pub regions: Vec<Region>,
}

impl World {
    pub fn image(&self, id: &str) -> Option<&CatalogImage> {
        self.images.iter().find(|i| i.image_id == id)
    }

    pub fn region(&self, name: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.name == name)
    }

    /// First declared region containing the point. Generated regions never
    /// overlap, so "first" is unambiguous there.
    pub fn region_containing(&self, lon: f64, lat: f64) -> Option<&Region> {
        self.regions.iter().find(|r| r.contains(lon, lat))
    }

    pub fn series_value(&self, region: &str, date: NaiveDate, variable: &str) -> Option<f64> {
        self.series
            .iter()
            .find(|r| r.region == region && r.date == date && r.variable == variable)
            .map(|r| r.value)
    }

    /// Checks every structural invariant of the generated world.
    pub fn validate(&self) -> Result<(), String> {
        let epoch_end = epoch_start() + chrono::Days::new(EPOCH_DAYS as u64 - 1);
        for img in &self.images {
            if !PRODUCTS.contains(&img.product.as_str()) {
                return Err(format!("{}: unknown product {}", img.image_id, img.product));
            }
            if !(-90.0..=90.0).contains(&img.lat) || !(-180.0..=180.0).contains(&img.lon) {
                return Err(format!("{}: coordinates out of range", img.image_id));
            }
            if img.timestamp < epoch_start() || img.timestamp > epoch_end {
                return Err(format!("{}: timestamp outside epoch", img.image_id));
            }
            for obj in &img.objects {
                if !CATEGORIES.contains(&obj.category.as_str()) {
                    return Err(format!("{}: unknown category {}", img.image_id, obj.category));
                }
                let [x0, y0, x1, y1] = obj.bbox;
                let in_unit = [x0, y0, x1, y1].iter().all(|v| (0.0..=1.0).contains(v));
                if !in_unit || x0 >= x1 || y0 >= y1 {
                    return Err(format!("{}: malformed bbox {:?}", img.image_id, obj.bbox));
                }
            }
        }
        for region in &self.regions {
            let [lon0, lat0, lon1, lat1] = region.bbox;
            if lon0 >= lon1 || lat0 >= lat1 {
                return Err(format!("region {}: degenerate bbox", region.name));
            }
            if !(-180.0..=180.0).contains(&lon0)
                || !(-180.0..=180.0).contains(&lon1)
                || !(-90.0..=90.0).contains(&lat0)
                || !(-90.0..=90.0).contains(&lat1)
            {
                return Err(format!("region {}: bbox out of range", region.name));
            }
        }
        // Completeness and uniqueness: one row per (region, date, variable)
        // over the whole epoch.
        let mut seen = std::collections::BTreeSet::new();
        for row in &self.series {
            if self.region(&row.region).is_none() {
                return Err(format!("series row references unknown region {}", row.region));
            }
            if !VARIABLES.contains(&row.variable.as_str()) {
                return Err(format!("series row has unknown variable {}", row.variable));
            }
            if row.value.is_nan() {
                return Err("series row holds NaN".into());
            }
            match row.variable.as_str() {
                "ndvi" if !(-1.0..=1.0).contains(&row.value) => {
                    return Err(format!("ndvi value {} out of range", row.value))
                }
                "builtup" | "forest_loss" | "crop_index" | "damage_count" | "population"
                    if row.value < 0.0 =>
                {
                    return Err(format!("{} value {} negative", row.variable, row.value))
                }
                _ => {}
            }
            if !seen.insert((row.region.clone(), row.date, row.variable.clone())) {
                return Err(format!(
                    "duplicate series row ({}, {}, {})",
                    row.region, row.date, row.variable
                ));
            }
        }
        let expect = self.regions.len() * VARIABLES.len() * EPOCH_DAYS as usize;
        if self.series.len() != expect {
            return Err(format!("series has {} rows, expected {expect}", self.series.len()));
        }
        Ok(())
    }
}

/// Stable detection identifier: object `k` of an image.
pub fn detection_id(image_id: &str, object_index: usize) -> String {
    format!("{image_id}:obj{object_index}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandleKind {
    ImageSet,
    DetectionSet,
    SeriesSlice,
}

impl std::fmt::Display for HandleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            HandleKind::ImageSet => "image_set",
            HandleKind::DetectionSet => "detection_set",
            HandleKind::SeriesSlice => "series_slice",
        };
        f.write_str(s)
    }
}

/// Immutable reference to an intermediate result set. Filters derive new
/// handles instead of mutating old ones, so chains commute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handle {
    pub handle_id: String,
    pub kind: HandleKind,
    /// Image ids or detection ids, in catalog order.
    pub contents: Vec<String>,
    pub parent: Option<String>,
}

/// Definitions for every sandbox tool, in presentation order.
pub fn registry() -> ToolRegistry {
    let mut reg = ToolRegistry::new();
    let defs = vec![
        ToolDefinition::new(
            "load_product",
            "Load an imagery product and return a handle to its full image set.",
            vec![ParamSpec::required(
                "product",
                ParamKind::Enum { values: PRODUCTS.iter().map(|s| s.to_string()).collect() },
                "Product identifier.",
            )],
        ),
        ToolDefinition::new(
            "list_products",
            "List the imagery products available in the catalog.",
            vec![],
        ),
        ToolDefinition::new(
            "filter_spatial",
            "Keep only images whose center falls inside a bounding box or named region.",
            vec![
                ParamSpec::required("handle", ParamKind::String, "Image-set handle to filter."),
                ParamSpec::optional(
                    "bbox",
                    ParamKind::Array { elem: Box::new(ParamKind::Number) },
                    "[lon_min, lat_min, lon_max, lat_max] in degrees.",
                ),
                ParamSpec::optional("region", ParamKind::String, "Named region to filter by."),
            ],
        ),
        ToolDefinition::new(
            "filter_temporal",
            "Keep only images timestamped within an inclusive date range.",
            vec![
                ParamSpec::required("handle", ParamKind::String, "Image-set handle to filter."),
                ParamSpec::required("start_date", ParamKind::String, "First date, YYYY-MM-DD."),
                ParamSpec::required("end_date", ParamKind::String, "Last date, YYYY-MM-DD."),
            ],
        ),
        ToolDefinition::new(
            "run_detection",
            "Detect annotated objects in every image of an image set.",
            vec![
                ParamSpec::required("handle", ParamKind::String, "Image-set handle to detect over."),
                ParamSpec::optional(
                    "drop_rate",
                    ParamKind::Number,
                    "Probability of missing each object (default 0).",
                ),
                ParamSpec::optional(
                    "jitter",
                    ParamKind::Number,
                    "Uniform box-coordinate noise amplitude (default 0).",
                ),
            ],
        ),
        ToolDefinition::new(
            "filter_category",
            "Keep only detections of one object category.",
            vec![
                ParamSpec::required("handle", ParamKind::String, "Detection-set handle to filter."),
                ParamSpec::required(
                    "category",
                    ParamKind::Enum { values: CATEGORIES.iter().map(|s| s.to_string()).collect() },
                    "Object category to keep.",
                ),
            ],
        ),
        ToolDefinition::new(
            "render_map",
            "Write a detection set to a GeoJSON map artifact.",
            vec![
                ParamSpec::required("handle", ParamKind::String, "Detection-set handle to render."),
                ParamSpec::optional(
                    "out_path",
                    ParamKind::String,
                    "Artifact file name (defaults to <task>_map.geojson).",
                ),
            ],
        ),
        ToolDefinition::new(
            "query_series",
            "Aggregate a regional measurement series over an inclusive date range.",
            vec![
                ParamSpec::required("region", ParamKind::String, "Region name."),
                ParamSpec::required(
                    "variable",
                    ParamKind::Enum { values: VARIABLES.iter().map(|s| s.to_string()).collect() },
                    "Series variable.",
                ),
                ParamSpec::required("start_date", ParamKind::String, "First date, YYYY-MM-DD."),
                ParamSpec::required("end_date", ParamKind::String, "Last date, YYYY-MM-DD."),
                ParamSpec::required(
                    "aggregate",
                    ParamKind::Enum { values: AGGREGATES.iter().map(|s| s.to_string()).collect() },
                    "Aggregation to apply.",
                ),
            ],
        ),
        ToolDefinition::new(
            "correlate",
            "Sum, over each detection in a set, the containing region's series value \
             at the detection's image date.",
            vec![
                ParamSpec::required(
                    "damage_handle",
                    ParamKind::String,
                    "Detection-set handle, typically damaged buildings.",
                ),
                ParamSpec::optional(
                    "population_variable",
                    ParamKind::String,
                    "Series variable to sum (default population).",
                ),
            ],
        ),
        ToolDefinition::new(
            "final_answer",
            "Record the final answer for the task.",
            vec![ParamSpec::required("answer", ParamKind::String, "The answer value or text.")],
        ),
    ];
    for def in defs {
        reg.register(def).expect("sandbox registry is well formed");
    }
    reg
}

/// Writes `catalog.jsonl`, `series.csv`, and `regions.json` into `dir`.
pub fn write_bundle(world: &World, dir: &Path) -> Result<(), SandboxError> {
    std::fs::create_dir_all(dir)?;
    let mut catalog = String::new();
    for img in &world.images {
        catalog.push_str(&serde_json::to_string(img).expect("image serializes"));
        catalog.push('\n');
    }
    std::fs::write(dir.join("catalog.jsonl"), catalog)?;

    let mut csv = String::from("region,date,variable,value\n");
    for row in &world.series {
        csv.push_str(&format!("{},{},{},{}\n", row.region, row.date, row.variable, row.value));
    }
    std::fs::write(dir.join("series.csv"), csv)?;

    let table: BTreeMap<&str, [f64; 4]> =
        world.regions.iter().map(|r| (r.name.as_str(), r.bbox)).collect();
    let mut regions = serde_json::to_string_pretty(&table).expect("region table serializes");
    regions.push('\n');
    std::fs::write(dir.join("regions.json"), regions)?;
    Ok(())
}

/// Reads a bundle written by [`write_bundle`].
pub fn load_bundle(dir: &Path) -> Result<World, SandboxError> {
    let catalog = std::fs::read_to_string(dir.join("catalog.jsonl"))?;
    let mut images = Vec::new();
    for line in catalog.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let img: CatalogImage = serde_json::from_str(line)
            .map_err(|e| SandboxError::InvalidArgument(format!("catalog.jsonl: {e}")))?;
        images.push(img);
    }

    let mut series = Vec::new();
    let mut reader = csv::Reader::from_path(dir.join("series.csv"))
        .map_err(|e| SandboxError::InvalidArgument(format!("series.csv: {e}")))?;
    for record in reader.deserialize::<SeriesRow>() {
        series.push(record.map_err(|e| SandboxError::InvalidArgument(format!("series.csv: {e}")))?);
    }

    let regions_text = std::fs::read_to_string(dir.join("regions.json"))?;
    let table: BTreeMap<String, [f64; 4]> = serde_json::from_str(&regions_text)
        .map_err(|e| SandboxError::InvalidArgument(format!("regions.json: {e}")))?;
    let regions = table.into_iter().map(|(name, bbox)| Region { name, bbox }).collect();

    Ok(World { images, series, regions })
}
