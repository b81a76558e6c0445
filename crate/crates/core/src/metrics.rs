//! One-pass-evaluation Success and Precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou3d, Box7};

/// Upper end of the center-distance threshold range, in meters.
pub const PRECISION_RANGE: f64 = 2.0;

/// Area under the success plot, in percent. The fraction of frames with
/// IoU above a threshold, integrated over thresholds in `[0, 1]`, equals the
/// mean IoU, which is what is computed.
pub fn success(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::UndefinedMetric);
    }
    if let Some(bad) = ious.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Parameter(format!("IoU {bad} outside [0, 1]")));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64 * 100.0)
}

/// Area under the precision plot over `[0, 2]` m, normalized, in percent:
/// the mean of `(2 - min(d, 2)) / 2`.
pub fn precision(distances: &[f64]) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::UndefinedMetric);
    }
    if let Some(bad) = distances.iter().find(|d| !(**d >= 0.0)) {
        return Err(Error::Parameter(format!("distance {bad} is negative")));
    }
    let area: f64 = distances
        .iter()
        .map(|&d| (PRECISION_RANGE - d.min(PRECISION_RANGE)) / PRECISION_RANGE)
        .sum();
    Ok(area / distances.len() as f64 * 100.0)
}

/// Per-frame outcome of a tracking run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub tracklet: String,
    pub category: String,
    pub frame: usize,
    pub pred: Box7,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<Box7>,
    #[serde(default)]
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<crate::model::StageTimings>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub category: String,
    pub frames: usize,
    pub success: f64,
    pub precision: f64,
    pub degraded: usize,
    #[serde(skip)]
    pub ious: Vec<f64>,
    #[serde(skip)]
    pub distances: Vec<f64>,
}

impl EvalReport {
    /// Scores every record that carries a ground-truth box.
    pub fn from_records(category: &str, records: &[FrameRecord]) -> Result<Self> {
        let scored: Vec<(&FrameRecord, &Box7)> = records
            .iter()
            .filter(|r| r.category == category)
            .filter_map(|r| r.gt.as_ref().map(|g| (r, g)))
            .collect();
        let ious: Vec<f64> = scored.iter().map(|(r, g)| iou3d(&r.pred, g)).collect();
        let distances: Vec<f64> = scored.iter().map(|(r, g)| r.pred.center_distance(g)).collect();
        Ok(EvalReport {
            category: category.to_string(),
            frames: scored.len(),
            success: success(&ious)?,
            precision: precision(&distances)?,
            degraded: scored.iter().filter(|(r, _)| r.degraded).count(),
            ious,
            distances,
        })
    }

    /// Categories present in the records, in first-seen order.
    pub fn by_category(records: &[FrameRecord]) -> Result<Vec<EvalReport>> {
        let mut cats: Vec<&str> = Vec::new();
        for r in records {
            if !cats.contains(&r.category.as_str()) {
                cats.push(&r.category);
            }
        }
        cats.into_iter().map(|c| EvalReport::from_records(c, records)).collect()
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{}\tframes {}\tSuccess {:.1}\tPrecision {:.1}",
            self.category, self.frames, self.success, self.precision
        )
    }

    pub fn per_frame_table(&self) -> String {
        let mut s = String::from("frame\tiou\tdistance\n");
        for (i, (iou, d)) in self.ious.iter().zip(&self.distances).enumerate() {
            s.push_str(&format!("{i}\t{iou:.6}\t{d:.6}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(success(&[1.0; 4]).unwrap(), 100.0);
        assert_eq!(success(&[0.5; 3]).unwrap(), 50.0);
        assert_eq!(precision(&[0.0; 2]).unwrap(), 100.0);
        assert_eq!(precision(&[1.0; 2]).unwrap(), 50.0);
        assert_eq!(precision(&[2.0, 7.5]).unwrap(), 0.0);
        assert!(matches!(success(&[]), Err(Error::UndefinedMetric)));
        assert!(matches!(precision(&[]), Err(Error::UndefinedMetric)));
    }
}
