//! Repeated SCP-vs-SACP trials over random splits.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::{aggregate_with, calibrate, predict_sets_for_with, SacpConfig};
use crate::error::{Error, Result};
use crate::grid::{LabelGrid, PredictionSetGrid, ProbabilityGrid, Role, SplitMask};
use crate::harness::split::sample_split;
use crate::metrics::{evaluate, MetricReport, SizeBins, DEFAULT_MIN_BIN_COUNT};
use crate::par::{self, Exec};
use crate::scores::{score_field_with, RandomizationField, ScoreFunctionConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub alpha: f64,
    pub score: ScoreFunctionConfig,
    pub sacp: SacpConfig,
    /// Fraction of the non-train labeled pixels used for calibration.
    pub cal_ratio: f64,
    pub train_count: usize,
    pub trials: usize,
    pub seed: u64,
    /// Inclusive size ranges for SSCV; `None` picks the default binning.
    pub size_bins: Option<Vec<(usize, usize)>>,
    pub min_bin_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            score: ScoreFunctionConfig::aps(),
            sacp: SacpConfig::default(),
            cal_ratio: 0.5,
            train_count: 128,
            trials: 30,
            seed: 0,
            size_bins: None,
            min_bin_count: DEFAULT_MIN_BIN_COUNT,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if !(self.cal_ratio > 0.0 && self.cal_ratio < 1.0) {
            return Err(Error::InvalidConfig(format!("cal ratio must be in (0, 1), got {}", self.cal_ratio)));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be positive".into()));
        }
        self.score.validate()?;
        self.sacp.validate()
    }

    pub fn bins(&self, num_classes: usize) -> Result<SizeBins> {
        match &self.size_bins {
            Some(ranges) => SizeBins::new(ranges.clone(), num_classes),
            None => Ok(SizeBins::default_for(num_classes)),
        }
    }
}

/// Independent 64-bit seed for stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    /// `None` when the split was supplied rather than sampled.
    pub split_seed: Option<u64>,
    pub score_seed: u64,
    pub n_cal: usize,
    pub n_test: usize,
    /// `None` when the threshold is infinite.
    pub tau_scp: Option<f64>,
    pub tau_sacp: Option<f64>,
    pub scp: MetricReport,
    pub sacp: MetricReport,
}

impl TrialRecord {
    /// Mean set size saved by aggregation; positive when SACP is smaller.
    pub fn size_reduction(&self) -> f64 {
        self.scp.mean_size - self.sacp.mean_size
    }
}

/// One trial with the prediction sets kept for inspection.
///
/// Sets are defined on Cal and Test pixels; metrics only read Test.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub record: TrialRecord,
    pub mask: SplitMask,
    pub scp_sets: PredictionSetGrid,
    pub sacp_sets: PredictionSetGrid,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub coverage: f64,
    pub mean_size: f64,
    pub sscv: f64,
    pub oa: f64,
    pub aa: f64,
}

impl MetricStats {
    fn collect(reports: &[&MetricReport], f: impl Fn(&[f64]) -> f64) -> Self {
        let pick = |g: fn(&MetricReport) -> f64| f(&reports.iter().map(|r| g(r)).collect::<Vec<_>>());
        Self {
            coverage: pick(|r| r.coverage),
            mean_size: pick(|r| r.mean_size),
            sscv: pick(|r| r.sscv),
            oa: pick(|r| r.oa),
            aa: pick(|r| r.aa),
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; 0 for a single value.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub config: RunConfig,
    pub scp_mean: MetricStats,
    pub scp_std: MetricStats,
    pub sacp_mean: MetricStats,
    pub sacp_std: MetricStats,
    pub mean_size_reduction: f64,
    /// Trials where SACP's mean set size is strictly below SCP's.
    pub sacp_smaller_trials: usize,
    pub trials: Vec<TrialRecord>,
}

impl TrialSummary {
    fn from_records(config: RunConfig, trials: Vec<TrialRecord>) -> Self {
        let scp: Vec<&MetricReport> = trials.iter().map(|t| &t.scp).collect();
        let sacp: Vec<&MetricReport> = trials.iter().map(|t| &t.sacp).collect();
        let reductions: Vec<f64> = trials.iter().map(TrialRecord::size_reduction).collect();
        Self {
            scp_mean: MetricStats::collect(&scp, mean),
            scp_std: MetricStats::collect(&scp, std_dev),
            sacp_mean: MetricStats::collect(&sacp, mean),
            sacp_std: MetricStats::collect(&sacp, std_dev),
            mean_size_reduction: mean(&reductions),
            sacp_smaller_trials: trials.iter().filter(|t| t.sacp.mean_size < t.scp.mean_size).count(),
            config,
            trials,
        }
    }
}

fn finite(tau: f64) -> Option<f64> {
    tau.is_finite().then_some(tau)
}

/// SCP and SACP on a fixed split, sharing one randomization field.
pub fn run_on_split(
    grid: &ProbabilityGrid,
    labels: &LabelGrid,
    mask: SplitMask,
    cfg: &RunConfig,
    score_seed: u64,
    exec: Exec,
) -> Result<TrialOutcome> {
    cfg.validate()?;
    labels.check_compatible(grid)?;
    let bins = cfg.bins(grid.num_classes())?;
    let base = score_field_with(grid, &mask, &cfg.score, &RandomizationField::new(score_seed), exec)?;
    let shown = [Role::Cal, Role::Test];

    let scp_cal = calibrate(&base, labels, &mask, cfg.alpha)?;
    let scp_sets = predict_sets_for_with(&base, &mask, &scp_cal, &shown, exec)?;
    let smoothed = aggregate_with(&base, &mask, &cfg.sacp, exec)?;
    let sacp_cal = calibrate(&smoothed, labels, &mask, cfg.alpha)?;
    let sacp_sets = predict_sets_for_with(&smoothed, &mask, &sacp_cal, &shown, exec)?;

    let report = |sets: &PredictionSetGrid| evaluate(sets, grid, labels, &mask, cfg.alpha, &bins, cfg.min_bin_count);
    let record = TrialRecord {
        trial: 0,
        split_seed: None,
        score_seed,
        n_cal: mask.count(Role::Cal),
        n_test: mask.count(Role::Test),
        tau_scp: finite(scp_cal.tau),
        tau_sacp: finite(sacp_cal.tau),
        scp: report(&scp_sets)?,
        sacp: report(&sacp_sets)?,
    };
    Ok(TrialOutcome { record, mask, scp_sets, sacp_sets })
}

/// Trial `index` of an experiment: a fresh split and randomization field,
/// both derived from the base seed.
pub fn run_trial(
    grid: &ProbabilityGrid,
    labels: &LabelGrid,
    cfg: &RunConfig,
    index: usize,
    exec: Exec,
) -> Result<TrialOutcome> {
    cfg.validate()?;
    let trial_seed = derive_seed(cfg.seed, index as u64);
    let split_seed = derive_seed(trial_seed, 0);
    let mask = sample_split(labels, cfg.train_count, cfg.cal_ratio, split_seed)?;
    let mut outcome = run_on_split(grid, labels, mask, cfg, derive_seed(trial_seed, 1), exec)?;
    outcome.record.trial = index;
    outcome.record.split_seed = Some(split_seed);
    Ok(outcome)
}

pub fn run_experiment(grid: &ProbabilityGrid, labels: &LabelGrid, cfg: &RunConfig) -> Result<TrialSummary> {
    run_experiment_with(grid, labels, cfg, Exec::default())
}

/// Trials run concurrently under a parallel policy; each trial's kernels
/// then run sequentially.
pub fn run_experiment_with(
    grid: &ProbabilityGrid,
    labels: &LabelGrid,
    cfg: &RunConfig,
    exec: Exec,
) -> Result<TrialSummary> {
    cfg.validate()?;
    let records = par::map_range(exec, cfg.trials, |t| {
        run_trial(grid, labels, cfg, t, Exec::Sequential).map(|o| o.record)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(TrialSummary::from_records(cfg.clone(), records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Lambda,
    K,
    Gamma,
    Alpha,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lambda" | "sacp.lambda" => Ok(SweepParam::Lambda),
            "k" | "sacp.k" => Ok(SweepParam::K),
            "gamma" | "cal_ratio" => Ok(SweepParam::Gamma),
            "alpha" => Ok(SweepParam::Alpha),
            other => Err(Error::InvalidConfig(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

impl SweepParam {
    fn apply(self, cfg: &mut RunConfig, value: f64) -> Result<()> {
        match self {
            SweepParam::Lambda => cfg.sacp.lambda = value,
            SweepParam::K => {
                if !(value >= 0.0 && value.fract() == 0.0) {
                    return Err(Error::InvalidConfig(format!("k must be a non-negative integer, got {value}")));
                }
                cfg.sacp.iterations = value as usize;
            }
            SweepParam::Gamma => cfg.cal_ratio = value,
            SweepParam::Alpha => cfg.alpha = value,
        }
        cfg.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: SweepParam,
    pub value: f64,
    pub summary: TrialSummary,
}

/// Reruns the experiment once per value of `param`, other settings fixed.
pub fn sweep(
    grid: &ProbabilityGrid,
    labels: &LabelGrid,
    cfg: &RunConfig,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<SweepPoint>> {
    values
        .iter()
        .map(|&value| {
            let mut point_cfg = cfg.clone();
            param.apply(&mut point_cfg, value)?;
            let summary = run_experiment(grid, labels, &point_cfg)?;
            Ok(SweepPoint { param, value, summary })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{generate_synthetic, SynthConfig};

    fn fixture() -> (ProbabilityGrid, LabelGrid) {
        generate_synthetic(&SynthConfig { height: 24, width: 24, ..SynthConfig::default() }).unwrap()
    }

    fn small_cfg() -> RunConfig {
        RunConfig { train_count: 32, trials: 4, seed: 11, ..RunConfig::default() }
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        assert_ne!(derive_seed(5, 0), derive_seed(5, 1));
        assert_eq!(derive_seed(5, 3), derive_seed(5, 3));
    }

    #[test]
    fn disabled_aggregation_matches_scp_exactly() {
        let (g, l) = fixture();
        let cfg = RunConfig { sacp: SacpConfig::disabled(), ..small_cfg() };
        let summary = run_experiment(&g, &l, &cfg).unwrap();
        for t in &summary.trials {
            assert_eq!(t.scp, t.sacp);
            assert_eq!(t.tau_scp, t.tau_sacp);
        }
        assert_eq!(summary.sacp_smaller_trials, 0);
    }

    #[test]
    fn sequential_and_parallel_runs_agree() {
        let (g, l) = fixture();
        let cfg = small_cfg();
        let a = run_experiment_with(&g, &l, &cfg, Exec::Sequential).unwrap();
        let b = run_experiment(&g, &l, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn trial_sets_cover_cal_and_test_only() {
        let (g, l) = fixture();
        let out = run_trial(&g, &l, &small_cfg(), 0, Exec::Sequential).unwrap();
        for p in 0..g.num_pixels() {
            let shown = matches!(out.mask.role(p), Role::Cal | Role::Test);
            assert_eq!(out.sacp_sets.is_defined(p), shown);
        }
        assert_eq!(out.record.n_cal + out.record.n_test + 32, g.num_pixels());
    }

    #[test]
    fn sweep_rejects_fractional_k() {
        let (g, l) = fixture();
        assert!(sweep(&g, &l, &small_cfg(), SweepParam::K, &[1.5]).is_err());
        let points = sweep(&g, &l, &small_cfg(), SweepParam::K, &[0.0, 2.0]).unwrap();
        assert_eq!(points[1].summary.config.sacp.iterations, 2);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig { size_bins: Some(vec![(0, 3), (4, 8)]), ..RunConfig::default() };
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"alpha": 0.1, "sacp": {"k": 3}}"#).unwrap();
        assert_eq!(partial.alpha, 0.1);
        assert_eq!(partial.sacp.iterations, 3);
        assert_eq!(partial.sacp.lambda, 0.5);
    }
}
