//! Attention evidence records and the top-down localisation path.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::HierarchyConfig;
use crate::error::{data_err, Error, Result};
use crate::hierarchy::{HierTrace, Level};
use crate::qga::QgaOutput;
use crate::tensor::{argmax, Matrix, Real};

/// Attention tensors of one unit invocation, stored as `f32`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub unit: usize,
    /// `n × M`; `null` without token-wise conditioning.
    pub alpha: Option<Vec<Vec<f32>>>,
    /// `n × n`; `null` for a sum-pooled unit.
    #[serde(rename = "A")]
    pub adjacency: Option<Vec<Vec<f32>>>,
    /// `null` for a sum-pooled unit.
    pub beta: Option<Vec<f32>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelRecords {
    #[serde(rename = "O")]
    pub object: Vec<UnitRecord>,
    #[serde(rename = "F")]
    pub frame: Vec<UnitRecord>,
    #[serde(rename = "C")]
    pub clip: Vec<UnitRecord>,
}

impl LevelRecords {
    pub fn level(&self, level: Level) -> &[UnitRecord] {
        match level {
            Level::Object => &self.object,
            Level::Frame => &self.frame,
            Level::Clip => &self.clip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub sample_id: String,
    pub levels: LevelRecords,
    pub prediction: usize,
    /// Ground-truth answer index, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<usize>,
    /// Candidate whose holistic query produced these tensors (multi-choice).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<usize>,
}

fn to_rows_f32<T: Real>(m: &Matrix<T>) -> Vec<Vec<f32>> {
    (0..m.rows()).map(|i| m.row(i).iter().map(|v| v.as_f64() as f32).collect()).collect()
}

fn unit_record<T: Real>(unit: usize, out: &QgaOutput<T>) -> UnitRecord {
    UnitRecord {
        unit,
        alpha: out.alpha.as_ref().map(to_rows_f32),
        adjacency: out.adjacency.as_ref().map(to_rows_f32),
        beta: out.beta.as_ref().map(|b| b.iter().map(|v| v.as_f64() as f32).collect()),
    }
}

/// Copies every attention tensor of a forward pass in evaluation order.
pub fn record_trace<T: Real>(
    sample_id: &str,
    trace: &HierTrace<T>,
    prediction: usize,
    answer: Option<usize>,
    candidate: Option<usize>,
) -> TraceRecord {
    let convert = |units: &[QgaOutput<T>]| units.iter().enumerate().map(|(i, u)| unit_record(i, u)).collect();
    TraceRecord {
        sample_id: String::from(sample_id),
        levels: LevelRecords {
            object: convert(&trace.level_o),
            frame: convert(&trace.level_f),
            clip: convert(&trace.level_c),
        },
        prediction,
        answer,
        candidate,
    }
}

fn rows_stochastic(rows: &[Vec<f32>], tol: f64) -> bool {
    rows.iter().all(|r| {
        r.iter().all(|&v| v.is_finite() && v >= 0.0) && libm::fabs(r.iter().map(|&v| v as f64).sum::<f64>() - 1.0) <= tol
    })
}

/// Structural checks: unit indices, square adjacency, matching lengths
/// and stochastic rows within `tol`.
pub fn validate_record(record: &TraceRecord, tol: f64) -> Result<()> {
    for level in Level::ALL {
        for (i, u) in record.levels.level(level).iter().enumerate() {
            let fail = |what: &str| data_err!("trace {} level {} unit {i}: {what}", record.sample_id, level.tag());
            if u.unit != i {
                return Err(fail("unit indices out of order"));
            }
            if u.adjacency.is_some() != u.beta.is_some() {
                return Err(fail("adjacency and beta must both be present or both null"));
            }
            if let (Some(a), Some(b)) = (&u.adjacency, &u.beta) {
                let n = b.len();
                if n == 0 || a.len() != n || a.iter().any(|r| r.len() != n) {
                    return Err(fail("adjacency is not n × n"));
                }
                if !rows_stochastic(a, tol) || !rows_stochastic(core::slice::from_ref(b), tol) {
                    return Err(fail("attention rows are not stochastic"));
                }
                if let Some(alpha) = &u.alpha {
                    if alpha.len() != n || !rows_stochastic(alpha, tol) {
                        return Err(fail("alpha rows malformed"));
                    }
                }
            } else if u.alpha.is_some() {
                return Err(fail("sum-pooled unit carries alpha"));
            }
        }
    }
    Ok(())
}

fn level_beta(record: &TraceRecord, level: Level, unit: usize) -> Result<&[f32]> {
    let units = record.levels.level(level);
    let u = units.get(unit).ok_or_else(|| {
        Error::PathUnavailable(alloc::format!("level {} has no unit {unit}", level.tag()))
    })?;
    u.beta
        .as_deref()
        .ok_or_else(|| Error::PathUnavailable(alloc::format!("level {} is sum-pooled", level.tag())))
}

/// Follows the largest pooling weight from the clip level down to one
/// object: `(clip, global frame index, object)`. Ties go to the lowest
/// index.
pub fn top_down_path(record: &TraceRecord, config: &HierarchyConfig) -> Result<(usize, usize, usize)> {
    let per_clip = config.frames_per_clip();
    let clip = argmax(level_beta(record, Level::Clip, 0)?);
    let local = argmax(level_beta(record, Level::Frame, clip)?);
    let frame = clip * per_clip + local;
    let object = argmax(level_beta(record, Level::Object, frame)?);
    Ok((clip, frame, object))
}
