//! Spatial score aggregation.
//!
//! One iteration replaces every valid pixel's score for label `y` by
//! `(1 - λ)·v + λ·mean_{j ∈ N} v_j`, reading only the previous iterate. It is
//! evaluated as `v + λ·Σ(v_j − v)/|N|`, which is algebraically the same and
//! leaves a locally constant field bit-for-bit unchanged.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Role, ScoreField, SplitMask};
use crate::par::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborhoodShape {
    FourConnected,
    EightConnected,
    Chebyshev { radius: usize },
}

impl NeighborhoodShape {
    /// Row-major `(dr, dc)` offsets, center excluded.
    pub fn offsets(self) -> Vec<(isize, isize)> {
        let radius = match self {
            NeighborhoodShape::FourConnected => {
                return vec![(-1, 0), (0, -1), (0, 1), (1, 0)];
            }
            NeighborhoodShape::EightConnected => 1,
            NeighborhoodShape::Chebyshev { radius } => radius as isize,
        };
        let mut out = Vec::new();
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                if (dr, dc) != (0, 0) {
                    out.push((dr, dc));
                }
            }
        }
        out
    }
}

impl FromStr for NeighborhoodShape {
    type Err = Error;

    /// Accepts `four`, `eight`, or `chebyshev:<r>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        match s.as_str() {
            "four" | "4" | "four_connected" => Ok(NeighborhoodShape::FourConnected),
            "eight" | "8" | "eight_connected" => Ok(NeighborhoodShape::EightConnected),
            _ => s
                .strip_prefix("chebyshev:")
                .and_then(|r| r.parse().ok())
                .map(|radius| NeighborhoodShape::Chebyshev { radius })
                .ok_or_else(|| Error::InvalidConfig(format!("unknown neighborhood {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeighborhoodSpec {
    pub shape: NeighborhoodShape,
    /// Roles whose pixels never act as neighbors.
    pub exclude_roles: Vec<Role>,
}

impl Default for NeighborhoodSpec {
    fn default() -> Self {
        Self { shape: NeighborhoodShape::EightConnected, exclude_roles: vec![Role::Train, Role::Ignore] }
    }
}

impl NeighborhoodSpec {
    pub fn with_shape(shape: NeighborhoodShape) -> Self {
        Self { shape, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SacpConfig {
    pub lambda: f64,
    #[serde(rename = "k")]
    pub iterations: usize,
    pub neighborhood: NeighborhoodSpec,
}

impl Default for SacpConfig {
    fn default() -> Self {
        Self { lambda: 0.5, iterations: 1, neighborhood: NeighborhoodSpec::default() }
    }
}

impl SacpConfig {
    pub fn new(lambda: f64, iterations: usize) -> Self {
        Self { lambda, iterations, ..Self::default() }
    }

    /// Configuration that leaves scores untouched.
    pub fn disabled() -> Self {
        Self::new(0.5, 0)
    }

    pub fn is_identity(&self) -> bool {
        self.iterations == 0 || self.lambda == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Neighbor lists in compressed form: pixel `p` owns `index[start[p]..start[p + 1]]`.
struct Neighbors {
    start: Vec<usize>,
    index: Vec<usize>,
}

impl Neighbors {
    fn build(field: &ScoreField, mask: &SplitMask, spec: &NeighborhoodSpec) -> Self {
        let (h, w) = (field.height() as isize, field.width() as isize);
        let offsets = spec.shape.offsets();
        let mut start = Vec::with_capacity(field.num_pixels() + 1);
        let mut index = Vec::new();
        start.push(0);
        for p in 0..field.num_pixels() {
            if field.is_valid(p) {
                let (r, c) = ((p as isize) / w, (p as isize) % w);
                for &(dr, dc) in &offsets {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h || nc >= w {
                        continue;
                    }
                    let q = (nr * w + nc) as usize;
                    if field.is_valid(q) && !spec.exclude_roles.contains(&mask.role(q)) {
                        index.push(q);
                    }
                }
            }
            start.push(index.len());
        }
        Self { start, index }
    }

    fn of(&self, p: usize) -> &[usize] {
        &self.index[self.start[p]..self.start[p + 1]]
    }
}

/// Applies `cfg.iterations` Jacobi sweeps of the aggregation operator.
///
/// Pixels with no admissible neighbor keep their previous value. Invalid
/// pixels are neither updated nor read.
pub fn aggregate(field: &ScoreField, mask: &SplitMask, cfg: &SacpConfig) -> Result<ScoreField> {
    aggregate_with(field, mask, cfg, Exec::default())
}

pub fn aggregate_with(
    field: &ScoreField,
    mask: &SplitMask,
    cfg: &SacpConfig,
    exec: Exec,
) -> Result<ScoreField> {
    mask.check_shape(field.height(), field.width(), "score field")?;
    cfg.validate()?;
    if cfg.is_identity() {
        return Ok(field.clone());
    }
    let k = field.num_classes();
    let neighbors = Neighbors::build(field, mask, &cfg.neighborhood);
    let lambda = cfg.lambda;
    let mut prev = field.scores().to_vec();
    let mut next = prev.clone();
    for _ in 0..cfg.iterations {
        par::for_each_chunk(exec, &mut next, k, |p, out| {
            let nbrs = neighbors.of(p);
            let own = &prev[p * k..(p + 1) * k];
            if nbrs.is_empty() {
                out.copy_from_slice(own);
                return;
            }
            let count = nbrs.len() as f64;
            for (y, slot) in out.iter_mut().enumerate() {
                let v = own[y];
                let spread = nbrs.iter().fold(0.0, |acc, &q| acc + (prev[q * k + y] - v));
                *slot = v + lambda * (spread / count);
            }
        });
        std::mem::swap(&mut prev, &mut next);
    }
    ScoreField::new(field.height(), field.width(), k, prev, field.validity().to_vec())
}
