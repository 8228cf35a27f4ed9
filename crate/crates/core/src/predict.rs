//! Checkpoint inference in original target units, and the interval
//! composition shared by the CLI and the HTTP service.

use serde::Serialize;

use crate::conformal::{calibrate, CalibrationTable, MiscoverageLevel};
use crate::error::{Error, Result};
use crate::evidential::{raw_interval, EvidentialField, RawInterval};
use crate::training::{Checkpoint, NormalizationTransform};

/// Mean and variance components of one predicted field, original units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldPrediction {
    pub grid_shape: Vec<usize>,
    pub mean: Vec<f64>,
    pub aleatoric: Vec<f64>,
    pub epistemic: Vec<f64>,
}

pub fn denormalize_field(field: &EvidentialField, t: &NormalizationTransform) -> FieldPrediction {
    FieldPrediction {
        grid_shape: field.shape().to_vec(),
        mean: field.predictions().into_iter().map(|v| t.denormalize(v)).collect(),
        aleatoric: field
            .aleatoric()
            .into_iter()
            .map(|v| t.denormalize_variance(v))
            .collect(),
        epistemic: field
            .epistemic()
            .into_iter()
            .map(|v| t.denormalize_variance(v))
            .collect(),
    }
}

pub fn predict(ckpt: &Checkpoint, params: &[f64]) -> Result<FieldPrediction> {
    Ok(denormalize_field(&ckpt.forward(params)?, &ckpt.transform))
}

/// Raw Student-t intervals at confidence `1 - delta`, mapped to original units.
pub fn raw_intervals(field: &EvidentialField, t: &NormalizationTransform, delta: f64) -> Result<Vec<RawInterval>> {
    field
        .params()
        .iter()
        .map(|m| {
            let r = raw_interval(m, delta)?;
            Ok(RawInterval {
                lo: t.denormalize(r.lo),
                hi: t.denormalize(r.hi),
                confidence: r.confidence,
            })
        })
        .collect()
}

/// Interval bounds for a full field.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalField {
    pub grid_shape: Vec<usize>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub width: Vec<f64>,
    /// Target coverage `1 - level`.
    pub confidence: f64,
    pub calibrated: bool,
    /// Elements whose calibrated bounds crossed and were collapsed.
    pub clamped_elements: usize,
}

/// Uncalibrated interval at miscoverage `level`, or the conformal interval
/// built from `table` (raw interval at the table's delta, shifted by the
/// per-element quantiles for `level`).
pub fn interval_field(
    ckpt: &Checkpoint,
    table: Option<&CalibrationTable>,
    params: &[f64],
    level: MiscoverageLevel,
    calibrated: bool,
) -> Result<IntervalField> {
    let field = ckpt.forward(params)?;
    interval_field_from(&field, &ckpt.transform, table, level, calibrated)
}

pub fn interval_field_from(
    field: &EvidentialField,
    transform: &NormalizationTransform,
    table: Option<&CalibrationTable>,
    level: MiscoverageLevel,
    calibrated: bool,
) -> Result<IntervalField> {
    let grid_shape = field.shape().to_vec();
    if !calibrated {
        let raw = raw_intervals(field, transform, level.value())?;
        let lo: Vec<f64> = raw.iter().map(|r| r.lo).collect();
        let hi: Vec<f64> = raw.iter().map(|r| r.hi).collect();
        let width = raw.iter().map(|r| r.hi - r.lo).collect();
        return Ok(IntervalField {
            grid_shape,
            lo,
            hi,
            width,
            confidence: 1.0 - level.value(),
            calibrated: false,
            clamped_elements: 0,
        });
    }
    let table = table.ok_or(Error::Config(
        "calibrated interval requested without a calibration table".into(),
    ))?;
    if table.grid_shape() != field.shape() {
        return Err(Error::Shape(format!(
            "calibration table grid {:?} does not match model grid {:?}",
            table.grid_shape(),
            field.shape()
        )));
    }
    let q = table.quantiles(level);
    if !q.attainable {
        return Err(Error::Config(format!(
            "miscoverage level {} is unattainable with {} calibration members (max confidence {})",
            level.value(),
            table.n(),
            table.max_attainable_confidence()
        )));
    }
    let raw = raw_intervals(field, transform, table.delta())?;
    let n = raw.len();
    let (mut lo, mut hi, mut width) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut clamped = 0;
    for (i, r) in raw.iter().enumerate() {
        let (ql, qh) = q.at(i);
        let c = calibrate(r, ql, qh, level);
        clamped += c.clamped as usize;
        lo.push(c.lo);
        hi.push(c.hi);
        width.push(c.hi - c.lo);
    }
    Ok(IntervalField {
        grid_shape,
        lo,
        hi,
        width,
        confidence: 1.0 - level.value(),
        calibrated: true,
        clamped_elements: clamped,
    })
}
