//! Machine-readable experiment reports and the numeric diff gate.
//!
//! A report carries the fully resolved config, so any run can be reproduced
//! from its own output. Reruns with the same seeds produce byte-identical
//! JSON except for wall-clock fields, and [`compare`] ignores exactly those.

use crate::analysis::{CorrelationReport, RandomProjectionStats, SweepCurve};
use crate::compression::{CompressionComparison, TopsisConfig};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::hijack::AttackReport;
use crate::training::{TrainReport, UnlearnMode};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

pub const REPORT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Fields with this name hold wall-clock seconds and are excluded from all
/// reproducibility comparisons.
pub const WALL_CLOCK_FIELD: &str = "wall_clock_s";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackStudyPayload {
    pub train: TrainReport,
    pub original_accuracy: f64,
    pub attack: AttackReport,
    /// Written next to the report when feature export is enabled.
    pub features_csv: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnlearnRow {
    pub original_accuracy: f64,
    /// Hijack accuracy of a surrogate model trained on extracted vectors.
    pub surrogate_accuracy: f64,
    /// Hijack top-1 of the distance rule on the same queries.
    pub distance_top1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnlearnStudyPayload {
    pub alpha: f64,
    pub beta: f64,
    pub mode: UnlearnMode,
    pub baseline: UnlearnRow,
    pub unlearned: UnlearnRow,
}

/// One row of the compression candidate table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateRow {
    pub expansion: f64,
    pub loss: f64,
    pub params: usize,
    pub original_acc: f64,
    pub hijack_top1_logits: f64,
    pub hijack_top1_fv: f64,
    pub closeness: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressStudyPayload {
    pub candidates: Vec<CandidateRow>,
    pub comparison: CompressionComparison,
    pub weights: TopsisConfig,
    pub selector: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogitTruncationPoint {
    pub k: usize,
    pub top1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogitTruncationPayload {
    pub points: Vec<LogitTruncationPoint>,
    pub untruncated_top1: f64,
    pub logit_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JlCheckPayload {
    pub points: Vec<RandomProjectionStats>,
}

/// Study-specific results, tagged by study name.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyPayload {
    Attack(AttackStudyPayload),
    Unlearn(UnlearnStudyPayload),
    Compress(CompressStudyPayload),
    RatioSweep(SweepCurve),
    WidthSweep(SweepCurve),
    Correlation(CorrelationReport),
    LogitTruncation(LogitTruncationPayload),
    JlCheck(JlCheckPayload),
}

/// The complete, self-describing record of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: String,
    pub study: String,
    pub config: RunConfig,
    pub payload: StudyPayload,
    pub seeds: crate::config::Seeds,
    pub wall_clock_s: f64,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| Error::Format(format!("report serialization failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("report does not match the schema: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Replace every wall-clock field in a JSON tree with zero.
pub fn normalize_wall_clock(value: &mut Value) {
    match value {
        Value::Object(map) => {
            for (key, v) in map.iter_mut() {
                if key == WALL_CLOCK_FIELD {
                    *v = Value::from(0.0);
                } else {
                    normalize_wall_clock(v);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(normalize_wall_clock),
        _ => {}
    }
}

/// One field whose values differ beyond the tolerance.
#[derive(Debug, Clone, Serialize)]
pub struct DiffEntry {
    pub path: String,
    pub left: Value,
    pub right: Value,
    /// Absolute numeric difference when both sides are numbers.
    pub delta: Option<f64>,
}

impl std::fmt::Display for DiffEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.delta {
            Some(d) => write!(f, "{}: {} vs {} (|delta| = {d})", self.path, self.left, self.right),
            None => write!(f, "{}: {} vs {}", self.path, self.left, self.right),
        }
    }
}

/// Field-wise diff of two reports of the same study.
///
/// Numeric leaves compare within `tolerance`; all other leaves compare
/// exactly. Wall-clock fields are always ignored. Errors when the reports
/// belong to different studies.
pub fn compare(left: &Value, right: &Value, tolerance: f64) -> Result<Vec<DiffEntry>> {
    let study = |v: &Value| v.get("study").and_then(|s| s.as_str()).map(str::to_owned);
    match (study(left), study(right)) {
        (Some(a), Some(b)) if a == b => {}
        (Some(a), Some(b)) => {
            return Err(Error::Config(format!(
                "cannot compare a '{a}' report against a '{b}' report"
            )))
        }
        _ => return Err(Error::Format("reports lack a 'study' field".into())),
    }
    let mut diffs = Vec::new();
    diff_value(left, right, "", tolerance, &mut diffs);
    Ok(diffs)
}

fn diff_value(left: &Value, right: &Value, path: &str, tol: f64, out: &mut Vec<DiffEntry>) {
    match (left, right) {
        (Value::Object(a), Value::Object(b)) => {
            let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
            keys.sort();
            keys.dedup();
            for key in keys {
                if key == WALL_CLOCK_FIELD {
                    continue;
                }
                let sub = if path.is_empty() {
                    key.clone()
                } else {
                    format!("{path}.{key}")
                };
                match (a.get(key), b.get(key)) {
                    (Some(l), Some(r)) => diff_value(l, r, &sub, tol, out),
                    (l, r) => out.push(DiffEntry {
                        path: sub,
                        left: l.cloned().unwrap_or(Value::Null),
                        right: r.cloned().unwrap_or(Value::Null),
                        delta: None,
                    }),
                }
            }
        }
        (Value::Array(a), Value::Array(b)) => {
            if a.len() != b.len() {
                out.push(DiffEntry {
                    path: format!("{path}.len"),
                    left: Value::from(a.len()),
                    right: Value::from(b.len()),
                    delta: None,
                });
                return;
            }
            for (i, (l, r)) in a.iter().zip(b).enumerate() {
                diff_value(l, r, &format!("{path}[{i}]"), tol, out);
            }
        }
        (Value::Number(a), Value::Number(b)) => {
            let (x, y) = (a.as_f64().unwrap_or(f64::NAN), b.as_f64().unwrap_or(f64::NAN));
            let delta = (x - y).abs();
            // NaN deltas count as differences
            let within = delta <= tol;
            if !within {
                out.push(DiffEntry {
                    path: path.to_string(),
                    left: left.clone(),
                    right: right.clone(),
                    delta: Some(delta),
                });
            }
        }
        (l, r) => {
            if l != r {
                out.push(DiffEntry {
                    path: path.to_string(),
                    left: l.clone(),
                    right: r.clone(),
                    delta: None,
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report_value(study: &str, top1: f64, wall: f64) -> Value {
        serde_json::json!({
            "version": "0.1.0",
            "study": study,
            "payload": { "attack": { "top_n": [top1, 0.9], "wall_clock_s": wall } },
            "wall_clock_s": wall,
        })
    }

    #[test]
    fn identical_reports_diff_empty() {
        let a = report_value("attack", 0.5, 1.0);
        let b = report_value("attack", 0.5, 9.0); // wall clock differs everywhere
        assert!(compare(&a, &b, 0.0).unwrap().is_empty());
    }

    #[test]
    fn numeric_drift_beyond_tolerance_is_listed() {
        let a = report_value("attack", 0.5, 1.0);
        let b = report_value("attack", 0.7, 1.0);
        let diffs = compare(&a, &b, 0.01).unwrap();
        assert_eq!(diffs.len(), 1);
        assert_eq!(diffs[0].path, "payload.attack.top_n[0]");
        assert!((diffs[0].delta.unwrap() - 0.2).abs() < 1e-12);
        // within tolerance: no diff
        assert!(compare(&a, &b, 0.25).unwrap().is_empty());
    }

    #[test]
    fn mismatched_studies_refuse_to_compare() {
        let a = report_value("attack", 0.5, 1.0);
        let b = report_value("unlearn", 0.5, 1.0);
        assert!(matches!(compare(&a, &b, 0.1).unwrap_err(), Error::Config(_)));
    }

    #[test]
    fn array_length_mismatch_is_one_diff() {
        let a = serde_json::json!({ "study": "attack", "xs": [1, 2, 3] });
        let b = serde_json::json!({ "study": "attack", "xs": [1, 2] });
        let diffs = compare(&a, &b, 0.0).unwrap();
        assert_eq!(diffs.len(), 1);
        assert_eq!(diffs[0].path, "xs.len");
    }

    #[test]
    fn normalization_zeroes_nested_wall_clocks() {
        let mut v = report_value("attack", 0.5, 3.25);
        normalize_wall_clock(&mut v);
        assert_eq!(v["wall_clock_s"], Value::from(0.0));
        assert_eq!(v["payload"]["attack"]["wall_clock_s"], Value::from(0.0));
    }
}
