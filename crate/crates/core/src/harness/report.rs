//! Report serialization: JSON documents with sorted keys and flat CSV rows.
//!
//! Report structs contain no optional fields, so a `null` in the serialized
//! form can only come from a non-finite float; such reports are refused.

use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Result, UqError};

/// One `method,seed,metric,value` line of a plotting CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub method: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

/// A report that can be flattened to CSV rows.
pub trait Experiment: Serialize {
    fn csv_rows(&self) -> Vec<CsvRow>;
}

fn find_null(value: &Value, path: &mut Vec<String>) -> Option<String> {
    match value {
        Value::Null => Some(if path.is_empty() {
            "report".into()
        } else {
            path.join(".")
        }),
        Value::Array(items) => items.iter().enumerate().find_map(|(i, v)| {
            path.push(i.to_string());
            let hit = find_null(v, path);
            path.pop();
            hit
        }),
        Value::Object(map) => map.iter().find_map(|(k, v)| {
            path.push(k.clone());
            let hit = find_null(v, path);
            path.pop();
            hit
        }),
        _ => None,
    }
}

/// Pretty JSON with keys in sorted order and a trailing newline.
/// Serializing, parsing and serializing again gives identical bytes.
pub fn to_report_string<T: Serialize>(report: &T) -> Result<String> {
    let value = serde_json::to_value(report).map_err(|e| UqError::Domain(e.to_string()))?;
    if let Some(at) = find_null(&value, &mut Vec::new()) {
        return Err(UqError::Domain(format!("report has a non-finite value at {at}")));
    }
    let mut text = serde_json::to_string_pretty(&value).map_err(|e| UqError::Domain(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn write_report<T: Serialize>(report: &T, path: impl AsRef<Path>) -> Result<()> {
    let text = to_report_string(report)?;
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| UqError::io(path, e))
}

pub fn csv_string(rows: &[CsvRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| UqError::Domain(e.to_string());
    w.write_record(["method", "seed", "metric", "value"]).map_err(err)?;
    for r in rows {
        if !r.value.is_finite() {
            return Err(UqError::Domain(format!(
                "non-finite {} for {} (seed {})",
                r.metric, r.method, r.seed
            )));
        }
        w.write_record([r.method.clone(), r.seed.to_string(), r.metric.clone(), r.value.to_string()])
            .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| UqError::Domain(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_csv_report(rows: &[CsvRow], path: impl AsRef<Path>) -> Result<()> {
    let text = csv_string(rows)?;
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| UqError::io(path, e))
}
