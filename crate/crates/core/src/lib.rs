//! Split conformal prediction over pixel grids, with spatial score
//! aggregation (SACP) on top of the standard per-pixel procedure (SCP).
//!
//! The pipeline is: score every label at every Cal and Test pixel, optionally
//! smooth the scores over a pixel neighborhood, calibrate a threshold on the
//! Cal pixels, and keep every label scoring at or below it at Test pixels.

pub mod conformal;
pub mod error;
pub mod grid;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod oracle;
pub mod par;
pub mod scores;

pub use conformal::{
    aggregate, calibrate, predict_sets, run_pipeline, CalibrationResult, NeighborhoodShape, NeighborhoodSpec,
    SacpConfig,
};
pub use error::{Error, Result};
pub use grid::{softmax_ingest, LabelGrid, PredictionSetGrid, ProbabilityGrid, Role, ScoreField, SplitMask};
pub use metrics::{evaluate, MetricReport, SizeBins};
pub use par::Exec;
pub use scores::{score_field, RandomizationField, ScoreFunctionConfig, ScoreKind};
