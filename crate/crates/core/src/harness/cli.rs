//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on I/O errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::conformal::{aggregate, calibrate, predict_sets, CalibrationResult, NeighborhoodShape, SacpConfig};
use crate::error::{Error, Result};
use crate::grid::{LabelGrid, PredictionSetGrid, ProbabilityGrid, ScoreField, SplitMask};
use crate::harness::experiment::{derive_seed, run_experiment, run_on_split, run_trial, sweep, RunConfig, SweepParam};
use crate::harness::pgm::render_size_map;
use crate::harness::split::sample_split;
use crate::harness::synth::{generate_synthetic, SynthConfig};
use crate::io::{load_grid, save_grid};
use crate::oracle::{oracle_report, OracleFixture};
use crate::par::Exec;
use crate::scores::{score_field, RandomizationField, ScoreFunctionConfig, ScoreKind};

/// Container names inside a dataset directory.
pub const PROBABILITIES_DIR: &str = "probabilities";
pub const LABELS_DIR: &str = "labels";
const SYNTH_CONFIG_FILE: &str = "synth.json";

#[derive(Debug, Parser)]
#[command(name = "sacp", version, about = "Conformal prediction sets for pixel grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic probability map and ground truth.
    Synth(SynthCmd),
    /// Sample a Train/Cal/Test mask over the labeled pixels.
    Split(SplitCmd),
    /// Compute a nonconformity score field.
    Score(ScoreCmd),
    /// Spatially aggregate a score field.
    Aggregate(AggregateCmd),
    /// Compute the conformal threshold.
    Calibrate(CalibrateCmd),
    /// Build prediction sets at Test pixels.
    Predict(PredictCmd),
    /// Compare SCP and SACP over repeated trials or on a given mask.
    Evaluate(EvaluateCmd),
    /// Rerun the evaluation across values of one parameter.
    Sweep(SweepCmd),
    /// Run the brute-force oracles.
    Verify(VerifyCmd),
}

#[derive(Debug, Args)]
struct SynthCmd {
    #[arg(long)]
    out: PathBuf,
    /// SynthConfig JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    smoothness: Option<f64>,
    #[arg(long)]
    signal: Option<f64>,
    /// Sets both the label and noise seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SplitCmd {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    train_count: usize,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    score: Option<ScoreKind>,
    #[arg(long = "raps.lambda")]
    raps_lambda: Option<f64>,
    #[arg(long = "raps.kreg")]
    raps_kreg: Option<usize>,
    #[arg(long = "saps.lambda")]
    saps_lambda: Option<f64>,
}

impl ScoreArgs {
    fn apply(&self, cfg: &mut ScoreFunctionConfig) {
        if let Some(kind) = self.score {
            cfg.kind = kind;
        }
        if let Some(v) = self.raps_lambda {
            cfg.raps_lambda = v;
        }
        if let Some(v) = self.raps_kreg {
            cfg.raps_kreg = v;
        }
        if let Some(v) = self.saps_lambda {
            cfg.saps_lambda = v;
        }
    }
}

#[derive(Debug, Args)]
struct SacpArgs {
    #[arg(long = "sacp.lambda")]
    sacp_lambda: Option<f64>,
    #[arg(long = "sacp.k")]
    sacp_k: Option<usize>,
    /// `four`, `eight` or `chebyshev:<r>`.
    #[arg(long)]
    neighborhood: Option<NeighborhoodShape>,
}

impl SacpArgs {
    fn apply(&self, cfg: &mut SacpConfig) {
        if let Some(v) = self.sacp_lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.sacp_k {
            cfg.iterations = v;
        }
        if let Some(shape) = self.neighborhood {
            cfg.neighborhood.shape = shape;
        }
    }
}

#[derive(Debug, Args)]
struct ScoreCmd {
    #[arg(long)]
    probs: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[command(flatten)]
    score: ScoreArgs,
    /// Seed of the per-pixel randomization field.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AggregateCmd {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[command(flatten)]
    sacp: SacpArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CalibrateCmd {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictCmd {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// JSON written by `calibrate`.
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Optional PGM set-size map.
    #[arg(long)]
    map: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Directory holding `probabilities` and `labels` containers.
    #[arg(long, conflicts_with_all = ["probs", "labels"])]
    data: Option<PathBuf>,
    #[arg(long, requires = "labels")]
    probs: Option<PathBuf>,
    #[arg(long, requires = "probs")]
    labels: Option<PathBuf>,
}

impl DataArgs {
    fn is_given(&self) -> bool {
        self.data.is_some() || self.probs.is_some()
    }

    fn load(&self) -> Result<(ProbabilityGrid, LabelGrid)> {
        let (probs, labels) = match (&self.data, &self.probs, &self.labels) {
            (Some(dir), _, _) => (dir.join(PROBABILITIES_DIR), dir.join(LABELS_DIR)),
            (None, Some(p), Some(l)) => (p.clone(), l.clone()),
            _ => return Err(Error::InvalidConfig("pass --data or both --probs and --labels".into())),
        };
        let grid: ProbabilityGrid = load_grid(probs)?;
        let labels: LabelGrid = load_grid(labels)?;
        labels.check_compatible(&grid)?;
        Ok((grid, labels))
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    /// RunConfig JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[command(flatten)]
    score: ScoreArgs,
    #[command(flatten)]
    sacp: SacpArgs,
    /// Calibration share of the non-train labeled pixels.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    min_bin_count: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => read_json(path)?,
            None => RunConfig::default(),
        };
        self.score.apply(&mut cfg.score);
        self.sacp.apply(&mut cfg.sacp);
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.gamma {
            cfg.cal_ratio = v;
        }
        if let Some(v) = self.train_count {
            cfg.train_count = v;
        }
        if let Some(v) = self.trials {
            cfg.trials = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.min_bin_count {
            cfg.min_bin_count = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct EvaluateCmd {
    #[command(flatten)]
    data: DataArgs,
    /// Evaluate once on this mask instead of sampling splits.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Writes SCP and SACP set-size maps of the first trial here.
    #[arg(long)]
    map_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunArgs,
    /// One of `lambda`, `k`, `gamma`, `alpha`.
    #[arg(long)]
    param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyCmd {
    /// Defaults to the synthetic fixture when no data is given.
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 999)]
    permutations: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

/// Pretty JSON with a trailing newline, to `out` or stdout.
fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source }),
        None => std::io::stdout()
            .lock()
            .write_all(text.as_bytes())
            .map_err(|source| Error::Io { path: PathBuf::from("<stdout>"), source }),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })
}

fn write_maps(dir: &Path, scp: &PredictionSetGrid, sacp: &PredictionSetGrid) -> Result<()> {
    create_dir(dir)?;
    render_size_map(scp, dir.join("scp_size.pgm"))?;
    render_size_map(sacp, dir.join("sacp_size.pgm"))
}

fn synth(cmd: SynthCmd) -> Result<()> {
    let mut cfg = match &cmd.config {
        Some(path) => read_json(path)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = cmd.seed {
        let seeded = SynthConfig::seeded(seed);
        cfg.noise_seed = seeded.noise_seed;
        cfg.label_seed = seeded.label_seed;
    }
    cfg.height = cmd.height.unwrap_or(cfg.height);
    cfg.width = cmd.width.unwrap_or(cfg.width);
    cfg.num_classes = cmd.classes.unwrap_or(cfg.num_classes);
    cfg.smoothness = cmd.smoothness.unwrap_or(cfg.smoothness);
    cfg.signal = cmd.signal.unwrap_or(cfg.signal);
    let (grid, labels) = generate_synthetic(&cfg)?;
    create_dir(&cmd.out)?;
    save_grid(&grid, cmd.out.join(PROBABILITIES_DIR))?;
    save_grid(&labels, cmd.out.join(LABELS_DIR))?;
    emit(&cfg, Some(&cmd.out.join(SYNTH_CONFIG_FILE)))
}

fn split(cmd: SplitCmd) -> Result<()> {
    let labels: LabelGrid = load_grid(&cmd.labels)?;
    let mask = sample_split(&labels, cmd.train_count, cmd.gamma, cmd.seed)?;
    save_grid(&mask, &cmd.out)
}

fn score(cmd: ScoreCmd) -> Result<()> {
    let grid: ProbabilityGrid = load_grid(&cmd.probs)?;
    let mask: SplitMask = load_grid(&cmd.mask)?;
    let mut cfg = ScoreFunctionConfig::default();
    cmd.score.apply(&mut cfg);
    let field = score_field(&grid, &mask, &cfg, &RandomizationField::new(cmd.seed))?;
    save_grid(&field, &cmd.out)
}

fn aggregate_cmd(cmd: AggregateCmd) -> Result<()> {
    let field: ScoreField = load_grid(&cmd.scores)?;
    let mask: SplitMask = load_grid(&cmd.mask)?;
    let mut cfg = SacpConfig::default();
    cmd.sacp.apply(&mut cfg);
    save_grid(&aggregate(&field, &mask, &cfg)?, &cmd.out)
}

fn calibrate_cmd(cmd: CalibrateCmd) -> Result<()> {
    let field: ScoreField = load_grid(&cmd.scores)?;
    let labels: LabelGrid = load_grid(&cmd.labels)?;
    let mask: SplitMask = load_grid(&cmd.mask)?;
    emit(&calibrate(&field, &labels, &mask, cmd.alpha)?, cmd.out.as_deref())
}

fn predict(cmd: PredictCmd) -> Result<()> {
    let field: ScoreField = load_grid(&cmd.scores)?;
    let mask: SplitMask = load_grid(&cmd.mask)?;
    let cal: CalibrationResult = read_json(&cmd.calibration)?;
    let sets = predict_sets(&field, &mask, &cal)?;
    save_grid(&sets, &cmd.out)?;
    match &cmd.map {
        Some(path) => render_size_map(&sets, path),
        None => Ok(()),
    }
}

fn evaluate(cmd: EvaluateCmd) -> Result<()> {
    let cfg = cmd.run.resolve()?;
    let (grid, labels) = cmd.data.load()?;
    match &cmd.mask {
        Some(path) => {
            let mask: SplitMask = load_grid(path)?;
            let outcome = run_on_split(&grid, &labels, mask, &cfg, cfg.seed, Exec::default())?;
            if let Some(dir) = &cmd.map_dir {
                write_maps(dir, &outcome.scp_sets, &outcome.sacp_sets)?;
            }
            emit(&outcome.record, cmd.out.as_deref())
        }
        None => {
            let summary = run_experiment(&grid, &labels, &cfg)?;
            if let Some(dir) = &cmd.map_dir {
                let first = run_trial(&grid, &labels, &cfg, 0, Exec::default())?;
                write_maps(dir, &first.scp_sets, &first.sacp_sets)?;
            }
            emit(&summary, cmd.out.as_deref())
        }
    }
}

fn sweep_cmd(cmd: SweepCmd) -> Result<()> {
    let cfg = cmd.run.resolve()?;
    let (grid, labels) = cmd.data.load()?;
    emit(&sweep(&grid, &labels, &cfg, cmd.param, &cmd.values)?, cmd.out.as_deref())
}

fn verify(cmd: VerifyCmd) -> Result<()> {
    let cfg = cmd.run.resolve()?;
    let (grid, labels) = if cmd.data.is_given() {
        cmd.data.load()?
    } else {
        generate_synthetic(&SynthConfig::default())?
    };
    let mask = match &cmd.mask {
        Some(path) => load_grid(path)?,
        None => sample_split(&labels, cfg.train_count, cfg.cal_ratio, derive_seed(cfg.seed, 0))?,
    };
    let fixture = OracleFixture { grid, labels, mask, rng: RandomizationField::new(derive_seed(cfg.seed, 1)) };
    let report = oracle_report(&fixture, &cfg.score, &cfg.sacp, cmd.permutations, derive_seed(cfg.seed, 2))?;
    emit(&report, cmd.out.as_deref())?;
    if !report.identity_holds {
        return Err(Error::InvariantViolation(format!(
            "integrated-size identity failed ({} tied calibration/test pairs)",
            report.tied_pairs
        )));
    }
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(cmd) => synth(cmd),
        Command::Split(cmd) => split(cmd),
        Command::Score(cmd) => score(cmd),
        Command::Aggregate(cmd) => aggregate_cmd(cmd),
        Command::Calibrate(cmd) => calibrate_cmd(cmd),
        Command::Predict(cmd) => predict(cmd),
        Command::Evaluate(cmd) => evaluate(cmd),
        Command::Sweep(cmd) => sweep_cmd(cmd),
        Command::Verify(cmd) => verify(cmd),
    }
}

/// Parses `argv` (including the program name), runs it, and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}
