//! Synthetic data, repeated trials, maps and the command-line front end.

pub mod cli;
pub mod experiment;
pub mod pgm;
pub mod split;
pub mod synth;

pub use experiment::{
    derive_seed, run_experiment, run_experiment_with, run_on_split, run_trial, sweep, MetricStats, RunConfig,
    SweepParam, SweepPoint, TrialOutcome, TrialRecord, TrialSummary,
};
pub use pgm::{render_size_map, size_map_pgm};
pub use split::sample_split;
pub use synth::{generate_synthetic, SynthConfig};
