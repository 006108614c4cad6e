//! Grid data model shared by every stage of the pipeline.
//!
//! All grids are row-major. Per-class arrays are indexed `(row, col, class)`,
//! so pixel `p = row * width + col` owns `values[p * K .. (p + 1) * K]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the per-pixel probability sum.
pub const SUM_TOLERANCE: f64 = 1e-6;

/// Sentinel for pixels without ground truth.
pub const UNLABELED: i32 = -1;

fn check_len(what: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch(format!(
            "{what}: expected {expected} elements, found {actual}"
        )));
    }
    Ok(())
}

/// Per-pixel softmax distributions over `num_classes` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityGrid {
    height: usize,
    width: usize,
    num_classes: usize,
    values: Vec<f64>,
}

impl ProbabilityGrid {
    /// Builds a grid, checking range and per-pixel normalisation.
    pub fn new(height: usize, width: usize, num_classes: usize, values: Vec<f64>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvariantViolation("num_classes must be positive".into()));
        }
        check_len("probabilities", height * width * num_classes, values.len())?;
        for (p, px) in values.chunks_exact(num_classes).enumerate() {
            let (r, c) = (p / width, p % width);
            if let Some(v) = px.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvariantViolation(format!(
                    "pixel ({r}, {c}): probability {v} outside [0, 1]"
                )));
            }
            let sum: f64 = px.iter().sum();
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::InvariantViolation(format!(
                    "pixel ({r}, {c}): probabilities sum to {sum}"
                )));
            }
        }
        Ok(Self { height, width, num_classes, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Distribution at linear pixel index `p`.
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.values[p * self.num_classes..(p + 1) * self.num_classes]
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        self.pixel(row * self.width + col)
    }

    /// Index of the most probable class, ties to the lowest index.
    pub fn argmax(&self, p: usize) -> usize {
        argmax(self.pixel(p))
    }
}

pub(crate) fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (y, &v) in probs.iter().enumerate().skip(1) {
        if v > probs[best] {
            best = y;
        }
    }
    best
}

/// Converts raw logits (`height * width * num_classes`, row-major) into a
/// probability grid with a max-shifted softmax per pixel.
pub fn softmax_ingest(
    height: usize,
    width: usize,
    num_classes: usize,
    logits: &[f64],
) -> Result<ProbabilityGrid> {
    check_len("logits", height * width * num_classes, logits.len())?;
    if let Some(index) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { index });
    }
    let mut values = Vec::with_capacity(logits.len());
    for px in logits.chunks_exact(num_classes.max(1)) {
        let max = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = values.len();
        values.extend(px.iter().map(|&z| (z - max).exp()));
        let total: f64 = values[start..].iter().sum();
        values[start..].iter_mut().for_each(|v| *v /= total);
    }
    ProbabilityGrid::new(height, width, num_classes, values)
}

/// Per-pixel ground truth; negative entries mean "unlabeled".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<i32>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<i32>) -> Result<Self> {
        check_len("labels", height * width, labels.len())?;
        for (p, &l) in labels.iter().enumerate() {
            if l < UNLABELED || l >= num_classes as i32 {
                return Err(Error::InvariantViolation(format!(
                    "pixel ({}, {}): label {l} outside [-1, {num_classes})",
                    p / width.max(1),
                    p % width.max(1)
                )));
            }
        }
        Ok(Self { height, width, num_classes, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    /// Label at pixel `p`, `None` when unlabeled.
    pub fn label(&self, p: usize) -> Option<usize> {
        usize::try_from(self.labels[p]).ok()
    }

    pub fn num_labeled(&self) -> usize {
        self.labels.iter().filter(|&&l| l >= 0).count()
    }

    /// Checks the labels fit the shape and class count of `grid`.
    pub fn check_compatible(&self, grid: &ProbabilityGrid) -> Result<()> {
        if (self.height, self.width) != (grid.height(), grid.width()) {
            return Err(Error::ShapeMismatch(format!(
                "labels are {}x{}, probabilities are {}x{}",
                self.height,
                self.width,
                grid.height(),
                grid.width()
            )));
        }
        if let Some(p) = self.labels.iter().position(|&l| l >= grid.num_classes() as i32) {
            return Err(Error::InvariantViolation(format!(
                "pixel ({}, {}): label {} >= {} classes",
                p / self.width,
                p % self.width,
                self.labels[p],
                grid.num_classes()
            )));
        }
        Ok(())
    }
}

/// Role a pixel plays in one split. Discriminants are the on-disk codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Role {
    Ignore = 0,
    Train = 1,
    Cal = 2,
    Test = 3,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Ignore, Role::Train, Role::Cal, Role::Test];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: i64) -> Option<Role> {
        match code {
            0 => Some(Role::Ignore),
            1 => Some(Role::Train),
            2 => Some(Role::Cal),
            3 => Some(Role::Test),
            _ => None,
        }
    }
}

/// One role per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMask {
    height: usize,
    width: usize,
    roles: Vec<Role>,
}

impl SplitMask {
    pub fn new(height: usize, width: usize, roles: Vec<Role>) -> Result<Self> {
        check_len("mask", height * width, roles.len())?;
        Ok(Self { height, width, roles })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn role(&self, p: usize) -> Role {
        self.roles[p]
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }

    /// Linear indices of every pixel with `role`, in row-major order.
    pub fn pixels_with(&self, role: Role) -> impl Iterator<Item = usize> + '_ {
        self.roles.iter().enumerate().filter(move |(_, &r)| r == role).map(|(p, _)| p)
    }

    pub(crate) fn check_shape(&self, height: usize, width: usize, what: &str) -> Result<()> {
        if (self.height, self.width) != (height, width) {
            return Err(Error::ShapeMismatch(format!(
                "mask is {}x{}, {what} is {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Per-pixel, per-label non-conformity scores with a validity flag per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreField {
    height: usize,
    width: usize,
    num_classes: usize,
    scores: Vec<f64>,
    valid: Vec<bool>,
}

impl ScoreField {
    pub fn new(
        height: usize,
        width: usize,
        num_classes: usize,
        scores: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        check_len("scores", height * width * num_classes, scores.len())?;
        check_len("validity", height * width, valid.len())?;
        Ok(Self { height, width, num_classes, scores, valid })
    }

    /// A field whose every pixel is valid.
    pub fn dense(height: usize, width: usize, num_classes: usize, scores: Vec<f64>) -> Result<Self> {
        Self::new(height, width, num_classes, scores, vec![true; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, p: usize) -> bool {
        self.valid[p]
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.scores[p * self.num_classes..(p + 1) * self.num_classes]
    }

    pub fn score(&self, p: usize, y: usize) -> f64 {
        self.scores[p * self.num_classes + y]
    }

    /// Multiplies every score by `factor`.
    pub fn scaled(&self, factor: f64) -> ScoreField {
        let mut out = self.clone();
        out.scores.iter_mut().for_each(|s| *s *= factor);
        out
    }
}

/// Per-pixel label subsets, stored as bitsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSetGrid {
    height: usize,
    width: usize,
    num_classes: usize,
    words: usize,
    bits: Vec<u64>,
    defined: Vec<bool>,
}

impl PredictionSetGrid {
    /// Every pixel undefined.
    pub fn empty(height: usize, width: usize, num_classes: usize) -> Self {
        let words = num_classes.div_ceil(64).max(1);
        Self {
            height,
            width,
            num_classes,
            words,
            bits: vec![0; height * width * words],
            defined: vec![false; height * width],
        }
    }

    pub(crate) fn from_parts(
        height: usize,
        width: usize,
        num_classes: usize,
        bits: Vec<u64>,
        defined: Vec<bool>,
    ) -> Self {
        let words = num_classes.div_ceil(64).max(1);
        debug_assert_eq!(bits.len(), height * width * words);
        Self { height, width, num_classes, words, bits, defined }
    }

    pub(crate) fn words_per_pixel(num_classes: usize) -> usize {
        num_classes.div_ceil(64).max(1)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn is_defined(&self, p: usize) -> bool {
        self.defined[p]
    }

    /// Marks pixel `p` as carrying a (possibly empty) set.
    pub fn define(&mut self, p: usize) {
        self.defined[p] = true;
    }

    pub fn insert(&mut self, p: usize, y: usize) {
        assert!(y < self.num_classes, "label {y} out of range");
        self.defined[p] = true;
        self.bits[p * self.words + y / 64] |= 1 << (y % 64);
    }

    pub fn contains(&self, p: usize, y: usize) -> bool {
        y < self.num_classes && self.bits[p * self.words + y / 64] & (1 << (y % 64)) != 0
    }

    /// Set cardinality, `None` when the pixel carries no set.
    pub fn set_size(&self, p: usize) -> Option<usize> {
        self.defined[p].then(|| {
            self.bits[p * self.words..(p + 1) * self.words]
                .iter()
                .map(|w| w.count_ones() as usize)
                .sum()
        })
    }

    pub fn labels(&self, p: usize) -> Vec<usize> {
        (0..self.num_classes).filter(|&y| self.contains(p, y)).collect()
    }
}
