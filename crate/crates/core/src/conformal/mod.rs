//! Split conformal calibration, prediction sets, and the SACP pipeline.

mod aggregate;

pub use aggregate::{aggregate, aggregate_with, NeighborhoodShape, NeighborhoodSpec, SacpConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelGrid, PredictionSetGrid, ProbabilityGrid, Role, ScoreField, SplitMask};
use crate::par::{self, Exec};
use crate::scores::{score_field_with, RandomizationField, ScoreFunctionConfig};

/// Threshold produced from a calibration sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// `+∞` when the calibration set is too small for the requested level;
    /// serialised as `null`.
    #[serde(with = "infinite_as_null")]
    pub tau: f64,
    pub alpha: f64,
    pub n_cal: usize,
    pub sorted_cal_scores: Vec<f64>,
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// 1-based rank `⌈(n + 1)(1 − α)⌉` of the calibration quantile.
///
/// The product is snapped down by a relative 1e-9 before the ceiling so a
/// decimal α such as 0.05 does not round up past an exact integer.
pub fn quantile_rank(n: usize, alpha: f64) -> usize {
    let target = (n as f64 + 1.0) * (1.0 - alpha);
    (target - 1e-9 * target.max(1.0)).ceil().max(1.0) as usize
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha must be in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn check_labels(field: &ScoreField, labels: &LabelGrid) -> Result<()> {
    if (labels.height(), labels.width()) != (field.height(), field.width()) {
        return Err(Error::ShapeMismatch(format!(
            "labels are {}x{}, scores are {}x{}",
            labels.height(),
            labels.width(),
            field.height(),
            field.width()
        )));
    }
    Ok(())
}

fn require_valid(field: &ScoreField, p: usize) -> Result<()> {
    if !field.is_valid(p) {
        return Err(Error::ShapeMismatch(format!(
            "pixel ({}, {}) has no scores",
            p / field.width(),
            p % field.width()
        )));
    }
    Ok(())
}

fn true_label_scores(field: &ScoreField, labels: &LabelGrid, mask: &SplitMask, role: Role) -> Result<Vec<f64>> {
    mask.check_shape(field.height(), field.width(), "score field")?;
    check_labels(field, labels)?;
    mask.pixels_with(role)
        .map(|p| {
            let y = labels.label(p).ok_or(Error::UnlabeledCalPixel {
                row: p / field.width(),
                col: p % field.width(),
            })?;
            if y >= field.num_classes() {
                return Err(Error::LabelOutOfRange { label: y, classes: field.num_classes() });
            }
            require_valid(field, p)?;
            Ok(field.score(p, y))
        })
        .collect()
}

/// Scores at the true label of every Cal pixel, row-major.
pub fn cal_scores(field: &ScoreField, labels: &LabelGrid, mask: &SplitMask) -> Result<Vec<f64>> {
    true_label_scores(field, labels, mask, Role::Cal)
}

/// Scores at the true label of every Test pixel, row-major.
pub fn test_true_label_scores(field: &ScoreField, labels: &LabelGrid, mask: &SplitMask) -> Result<Vec<f64>> {
    true_label_scores(field, labels, mask, Role::Test).map_err(|e| match e {
        Error::UnlabeledCalPixel { row, col } => {
            Error::InvariantViolation(format!("test pixel ({row}, {col}) has no label"))
        }
        other => other,
    })
}

/// Every label's score at every Test pixel, pixel-major.
pub fn test_scores_all_labels(field: &ScoreField, mask: &SplitMask) -> Result<Vec<f64>> {
    mask.check_shape(field.height(), field.width(), "score field")?;
    let mut out = Vec::with_capacity(mask.count(Role::Test) * field.num_classes());
    for p in mask.pixels_with(Role::Test) {
        require_valid(field, p)?;
        out.extend_from_slice(field.pixel(p));
    }
    Ok(out)
}

/// Conformal threshold from a raw calibration sample.
pub fn calibrate_scores(mut scores: Vec<f64>, alpha: f64) -> Result<CalibrationResult> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    scores.sort_by(f64::total_cmp);
    let n = scores.len();
    let rank = quantile_rank(n, alpha);
    let tau = if rank <= n { scores[rank - 1] } else { f64::INFINITY };
    Ok(CalibrationResult { tau, alpha, n_cal: n, sorted_cal_scores: scores })
}

/// Threshold from the true-label scores of the Cal pixels.
pub fn calibrate(field: &ScoreField, labels: &LabelGrid, mask: &SplitMask, alpha: f64) -> Result<CalibrationResult> {
    check_alpha(alpha)?;
    calibrate_scores(cal_scores(field, labels, mask)?, alpha)
}

/// Sets `{y : score(y) ≤ τ}` at every Test pixel.
pub fn predict_sets(field: &ScoreField, mask: &SplitMask, cal: &CalibrationResult) -> Result<PredictionSetGrid> {
    predict_sets_for(field, mask, cal, &[Role::Test])
}

/// Like [`predict_sets`] for an arbitrary group of roles.
pub fn predict_sets_for(
    field: &ScoreField,
    mask: &SplitMask,
    cal: &CalibrationResult,
    roles: &[Role],
) -> Result<PredictionSetGrid> {
    predict_sets_for_with(field, mask, cal, roles, Exec::default())
}

pub fn predict_sets_for_with(
    field: &ScoreField,
    mask: &SplitMask,
    cal: &CalibrationResult,
    roles: &[Role],
    exec: Exec,
) -> Result<PredictionSetGrid> {
    mask.check_shape(field.height(), field.width(), "score field")?;
    let k = field.num_classes();
    let words = PredictionSetGrid::words_per_pixel(k);
    let defined: Vec<bool> = mask.roles().iter().map(|r| roles.contains(r)).collect();
    if let Some(p) = (0..field.num_pixels()).find(|&p| defined[p] && !field.is_valid(p)) {
        require_valid(field, p)?;
    }
    let mut bits = vec![0u64; field.num_pixels() * words];
    par::for_each_chunk(exec, &mut bits, words, |p, out| {
        if defined[p] {
            for (y, &s) in field.pixel(p).iter().enumerate() {
                if s <= cal.tau {
                    out[y / 64] |= 1 << (y % 64);
                }
            }
        }
    });
    Ok(PredictionSetGrid::from_parts(field.height(), field.width(), k, bits, defined))
}

/// Aggregate, calibrate and predict from an already computed base field.
pub fn run_from_scores(
    base: &ScoreField,
    labels: &LabelGrid,
    mask: &SplitMask,
    sacp: &SacpConfig,
    alpha: f64,
) -> Result<(PredictionSetGrid, CalibrationResult)> {
    run_from_scores_with(base, labels, mask, sacp, alpha, Exec::default())
}

pub fn run_from_scores_with(
    base: &ScoreField,
    labels: &LabelGrid,
    mask: &SplitMask,
    sacp: &SacpConfig,
    alpha: f64,
    exec: Exec,
) -> Result<(PredictionSetGrid, CalibrationResult)> {
    let field = aggregate_with(base, mask, sacp, exec)?;
    let cal = calibrate(&field, labels, mask, alpha)?;
    let sets = predict_sets_for_with(&field, mask, &cal, &[Role::Test], exec)?;
    Ok((sets, cal))
}

/// The full pipeline: score, aggregate, calibrate, predict.
pub fn run_pipeline(
    grid: &ProbabilityGrid,
    labels: &LabelGrid,
    mask: &SplitMask,
    score_cfg: &ScoreFunctionConfig,
    sacp_cfg: &SacpConfig,
    alpha: f64,
    seed: u64,
) -> Result<(PredictionSetGrid, CalibrationResult)> {
    labels.check_compatible(grid)?;
    let base = score_field_with(grid, mask, score_cfg, &RandomizationField::new(seed), Exec::default())?;
    run_from_scores(&base, labels, mask, sacp_cfg, alpha)
}
