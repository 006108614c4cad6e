//! APS, RAPS and SAPS non-conformity scores.
//!
//! All three depend only on a pixel's probability vector, the rank of the
//! candidate label, and one uniform draw `u` shared by every label of the
//! pixel. Ranks come from a stable descending sort, so equal probabilities
//! are ordered by ascending label index and "mass ranked above `y`" is the
//! prefix of that total order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ProbabilityGrid, Role, ScoreField, SplitMask};
use crate::par::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Aps,
    Raps,
    Saps,
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aps" => Ok(ScoreKind::Aps),
            "raps" => Ok(ScoreKind::Raps),
            "saps" => Ok(ScoreKind::Saps),
            other => Err(Error::InvalidConfig(format!("unknown score function {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreFunctionConfig {
    pub kind: ScoreKind,
    pub raps_lambda: f64,
    pub raps_kreg: usize,
    pub saps_lambda: f64,
}

impl Default for ScoreFunctionConfig {
    fn default() -> Self {
        Self { kind: ScoreKind::Aps, raps_lambda: 0.01, raps_kreg: 1, saps_lambda: 0.2 }
    }
}

impl ScoreFunctionConfig {
    pub fn aps() -> Self {
        Self::default()
    }

    pub fn raps(lambda: f64, kreg: usize) -> Self {
        Self { kind: ScoreKind::Raps, raps_lambda: lambda, raps_kreg: kreg, ..Self::default() }
    }

    pub fn saps(lambda: f64) -> Self {
        Self { kind: ScoreKind::Saps, saps_lambda: lambda, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ScoreKind::Aps => Ok(()),
            ScoreKind::Raps if !(self.raps_lambda >= 0.0 && self.raps_lambda.is_finite()) => Err(
                Error::InvalidConfig(format!("raps_lambda must be >= 0, got {}", self.raps_lambda)),
            ),
            ScoreKind::Raps if self.raps_kreg == 0 => {
                Err(Error::InvalidConfig("raps_kreg must be >= 1".into()))
            }
            ScoreKind::Saps if !(self.saps_lambda >= 0.0 && self.saps_lambda.is_finite()) => Err(
                Error::InvalidConfig(format!("saps_lambda must be >= 0, got {}", self.saps_lambda)),
            ),
            _ => Ok(()),
        }
    }

    /// Scores every label of one pixel into `out`.
    pub fn score_all(&self, probs: &[f64], u: f64, out: &mut [f64]) {
        let ranks = rank_labels(probs);
        let pmax = probs[ranks.order[0]];
        let mut mass_above = 0.0;
        for (pos, &y) in ranks.order.iter().enumerate() {
            let rank = pos + 1;
            let aps = mass_above + u * probs[y];
            out[y] = match self.kind {
                ScoreKind::Aps => aps,
                ScoreKind::Raps => aps + self.raps_lambda * raps_penalty(rank, self.raps_kreg),
                ScoreKind::Saps => saps_from_rank(pmax, rank, u, self.saps_lambda),
            };
            mass_above += probs[y];
        }
    }

    pub fn score(&self, probs: &[f64], y: usize, u: f64) -> Result<f64> {
        match self.kind {
            ScoreKind::Aps => aps_score(probs, y, u),
            ScoreKind::Raps => raps_score(probs, y, u, self.raps_lambda, self.raps_kreg),
            ScoreKind::Saps => saps_score(probs, y, u, self.saps_lambda),
        }
    }
}

/// Labels ordered by descending probability, with 1-based ranks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankVector {
    pub order: Vec<usize>,
    ranks: Vec<usize>,
}

impl RankVector {
    pub fn rank(&self, y: usize) -> usize {
        self.ranks[y]
    }
}

pub fn rank_labels(probs: &[f64]) -> RankVector {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // sort_by is stable: equal probabilities keep ascending label order.
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut ranks = vec![0; probs.len()];
    for (pos, &y) in order.iter().enumerate() {
        ranks[y] = pos + 1;
    }
    RankVector { order, ranks }
}

fn check_label(probs: &[f64], y: usize) -> Result<()> {
    if y >= probs.len() {
        return Err(Error::LabelOutOfRange { label: y, classes: probs.len() });
    }
    Ok(())
}

fn raps_penalty(rank: usize, kreg: usize) -> f64 {
    rank.saturating_sub(kreg) as f64
}

fn saps_from_rank(pmax: f64, rank: usize, u: f64, lambda: f64) -> f64 {
    if rank == 1 {
        u * pmax
    } else {
        pmax + (rank as f64 - 2.0 + u) * lambda
    }
}

pub fn aps_score(probs: &[f64], y: usize, u: f64) -> Result<f64> {
    check_label(probs, y)?;
    let ranks = rank_labels(probs);
    let above = &ranks.order[..ranks.rank(y) - 1];
    let mass_above = above.iter().fold(0.0, |acc, &j| acc + probs[j]);
    Ok(mass_above + u * probs[y])
}

pub fn raps_score(probs: &[f64], y: usize, u: f64, lambda: f64, kreg: usize) -> Result<f64> {
    let aps = aps_score(probs, y, u)?;
    let rank = rank_labels(probs).rank(y);
    Ok(aps + lambda * raps_penalty(rank, kreg))
}

pub fn saps_score(probs: &[f64], y: usize, u: f64, lambda: f64) -> Result<f64> {
    check_label(probs, y)?;
    let ranks = rank_labels(probs);
    Ok(saps_from_rank(probs[ranks.order[0]], ranks.rank(y), u, lambda))
}

/// One uniform draw per pixel, a pure function of `(seed, row, col)`.
///
/// Row selects a ChaCha8 stream and column a word position, so a draw never
/// depends on grid width or evaluation order.
#[derive(Debug, Clone)]
pub struct RandomizationField {
    seed: u64,
    base: ChaCha8Rng,
}

impl RandomizationField {
    pub fn new(seed: u64) -> Self {
        Self { seed, base: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform on [0, 1) with 53 random bits.
    pub fn u(&self, row: usize, col: usize) -> f64 {
        let mut rng = self.base.clone();
        rng.set_stream(row as u64);
        rng.set_word_pos(2 * col as u128);
        (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Scores every label at every Cal and Test pixel; other pixels are invalid.
pub fn score_field(
    grid: &ProbabilityGrid,
    mask: &SplitMask,
    cfg: &ScoreFunctionConfig,
    rng: &RandomizationField,
) -> Result<ScoreField> {
    score_field_with(grid, mask, cfg, rng, Exec::default())
}

pub fn score_field_with(
    grid: &ProbabilityGrid,
    mask: &SplitMask,
    cfg: &ScoreFunctionConfig,
    rng: &RandomizationField,
    exec: Exec,
) -> Result<ScoreField> {
    mask.check_shape(grid.height(), grid.width(), "probability grid")?;
    cfg.validate()?;
    let k = grid.num_classes();
    let width = grid.width();
    let valid: Vec<bool> = mask.roles().iter().map(|r| matches!(r, Role::Cal | Role::Test)).collect();
    let mut scores = vec![0.0; grid.values().len()];
    par::for_each_chunk(exec, &mut scores, k, |p, out| {
        if valid[p] {
            cfg.score_all(grid.pixel(p), rng.u(p / width, p % width), out);
        }
    });
    ScoreField::new(grid.height(), width, k, scores, valid)
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: [f64; 3] = [0.6, 0.3, 0.1];

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    #[test]
    fn ranks_by_descending_probability() {
        let r = rank_labels(&P);
        assert_eq!(r.order, vec![0, 1, 2]);
        assert_eq!(r.rank(1), 2);
        assert_eq!(rank_labels(&[0.1, 0.2, 0.7]).order, vec![2, 1, 0]);
    }

    #[test]
    fn ties_rank_by_label_index() {
        assert_eq!(rank_labels(&[0.5, 0.5]).order, vec![0, 1]);
        assert_eq!(rank_labels(&[0.2, 0.4, 0.4]).order, vec![1, 2, 0]);
    }

    #[test]
    fn aps_examples() {
        close(aps_score(&P, 0, 0.5).unwrap(), 0.30);
        close(aps_score(&P, 2, 0.5).unwrap(), 0.95);
        assert_eq!(aps_score(&[1.0, 0.0], 0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn raps_examples() {
        close(raps_score(&P, 1, 0.5, 0.1, 1).unwrap(), 0.85);
        close(raps_score(&P, 0, 0.5, 0.1, 1).unwrap(), 0.30);
    }

    #[test]
    fn saps_examples() {
        close(saps_score(&P, 0, 0.5, 0.2).unwrap(), 0.30);
        close(saps_score(&P, 1, 0.5, 0.2).unwrap(), 0.70);
        close(saps_score(&P, 2, 0.5, 0.2).unwrap(), 0.90);
    }

    #[test]
    fn out_of_range_label_is_an_error() {
        assert!(matches!(aps_score(&P, 3, 0.5), Err(Error::LabelOutOfRange { label: 3, classes: 3 })));
        assert!(raps_score(&P, 7, 0.5, 0.1, 1).is_err());
        assert!(saps_score(&P, 3, 0.5, 0.2).is_err());
    }

    #[test]
    fn single_pixel_field_matches_hand_values() {
        let grid = ProbabilityGrid::new(1, 1, 3, P.to_vec()).unwrap();
        let mask = SplitMask::new(1, 1, vec![Role::Test]).unwrap();
        // Evaluate the field with whatever u the seed gives, then compare to
        // the closed form at that u.
        let rng = RandomizationField::new(3);
        let u = rng.u(0, 0);
        let f = score_field(&grid, &mask, &ScoreFunctionConfig::aps(), &rng).unwrap();
        close(f.score(0, 0), u * 0.6);
        close(f.score(0, 1), 0.6 + u * 0.3);
        close(f.score(0, 2), 0.9 + u * 0.1);
        let mut out = [0.0; 3];
        ScoreFunctionConfig::aps().score_all(&P, 0.5, &mut out);
        for (got, want) in out.iter().zip([0.30, 0.75, 0.95]) {
            close(*got, want);
        }
    }

    #[test]
    fn train_pixels_are_invalid() {
        let grid = ProbabilityGrid::new(1, 2, 2, vec![0.5; 4]).unwrap();
        let mask = SplitMask::new(1, 2, vec![Role::Train, Role::Cal]).unwrap();
        let f = score_field(&grid, &mask, &ScoreFunctionConfig::aps(), &RandomizationField::new(1)).unwrap();
        assert!(!f.is_valid(0));
        assert!(f.is_valid(1));
    }

    #[test]
    fn randomization_is_pure_in_seed_and_coords() {
        let a = RandomizationField::new(42);
        let b = RandomizationField::new(42);
        assert_eq!(a.u(3, 7).to_bits(), b.u(3, 7).to_bits());
        assert_ne!(a.u(3, 7), a.u(7, 3));
        assert_ne!(a.u(0, 0), RandomizationField::new(43).u(0, 0));
        let draws: Vec<f64> = (0..500).map(|i| a.u(i / 25, i % 25)).collect();
        assert!(draws.iter().all(|u| (0.0..1.0).contains(u)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 0.05, "{mean}");
    }

    #[test]
    fn same_seed_gives_bit_identical_fields() {
        let grid = ProbabilityGrid::new(2, 2, 2, vec![0.7, 0.3, 0.4, 0.6, 0.5, 0.5, 0.9, 0.1]).unwrap();
        let mask = SplitMask::new(2, 2, vec![Role::Cal; 4]).unwrap();
        let cfg = ScoreFunctionConfig::saps(0.2);
        let a = score_field(&grid, &mask, &cfg, &RandomizationField::new(9)).unwrap();
        let b = score_field_with(&grid, &mask, &cfg, &RandomizationField::new(9), Exec::Sequential).unwrap();
        let bits = |f: &ScoreField| f.scores().iter().map(|s| s.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        assert!(ScoreFunctionConfig::raps(-0.1, 1).validate().is_err());
        assert!(ScoreFunctionConfig::raps(0.1, 0).validate().is_err());
        assert!(ScoreFunctionConfig::saps(f64::NAN).validate().is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn distribution(max_k: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.0f64..1.0, 2..=max_k).prop_map(|w| {
                let total: f64 = w.iter().sum::<f64>() + 1e-9;
                w.iter().map(|x| (x + 1e-9 / w.len() as f64) / total).collect()
            })
        }

        fn configs() -> impl Strategy<Value = ScoreFunctionConfig> {
            prop_oneof![
                Just(ScoreFunctionConfig::aps()),
                (0.0f64..0.5, 1usize..4).prop_map(|(l, k)| ScoreFunctionConfig::raps(l, k)),
                (0.0f64..0.5).prop_map(ScoreFunctionConfig::saps),
            ]
        }

        proptest! {
            #[test]
            fn batch_matches_per_label_bitwise(p in distribution(10), u in 0.0f64..1.0, cfg in configs()) {
                let mut out = vec![0.0; p.len()];
                cfg.score_all(&p, u, &mut out);
                for (y, s) in out.iter().enumerate() {
                    prop_assert_eq!(s.to_bits(), cfg.score(&p, y, u).unwrap().to_bits());
                }
            }

            #[test]
            fn scores_are_monotone_in_rank(p in distribution(10), u in 0.0f64..1.0, cfg in configs()) {
                let mut out = vec![0.0; p.len()];
                cfg.score_all(&p, u, &mut out);
                let order = rank_labels(&p).order;
                for w in order.windows(2) {
                    prop_assert!(out[w[0]] <= out[w[1]], "{:?}", out);
                }
                prop_assert!(out.iter().all(|s| s.is_finite() && *s >= 0.0));
            }

            #[test]
            fn aps_strictly_increasing_in_u(p in distribution(8), y in 0usize..8, u1 in 0.0f64..1.0, u2 in 0.0f64..1.0) {
                let y = y % p.len();
                prop_assume!(p[y] > 1e-6 && (u1 - u2).abs() > 1e-6);
                let (lo, hi) = if u1 < u2 { (u1, u2) } else { (u2, u1) };
                prop_assert!(aps_score(&p, y, lo).unwrap() < aps_score(&p, y, hi).unwrap());
            }

            #[test]
            fn raps_without_penalty_is_aps(p in distribution(8), y in 0usize..8, u in 0.0f64..1.0, kreg in 1usize..5) {
                let y = y % p.len();
                prop_assert_eq!(
                    raps_score(&p, y, u, 0.0, kreg).unwrap().to_bits(),
                    aps_score(&p, y, u).unwrap().to_bits()
                );
            }

            #[test]
            fn saps_top_label_is_smallest_for_large_lambda(p in distribution(8), u in 0.0f64..1.0, extra in 0.0f64..1.0) {
                let pmax = p.iter().copied().fold(0.0, f64::max);
                let cfg = ScoreFunctionConfig::saps(pmax + extra);
                let mut out = vec![0.0; p.len()];
                cfg.score_all(&p, u, &mut out);
                let top = rank_labels(&p).order[0];
                prop_assert!(out.iter().all(|&s| out[top] <= s));
            }

            #[test]
            fn permuting_classes_permutes_scores(p in distribution(8), u in 0.0f64..1.0, cfg in configs(), seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                // Distinct probabilities keep the tie order out of the picture.
                let mut q = p.clone();
                for (i, v) in q.iter_mut().enumerate() {
                    *v += i as f64 * 1e-7;
                }
                let total: f64 = q.iter().sum();
                q.iter_mut().for_each(|v| *v /= total);
                let mut perm: Vec<usize> = (0..q.len()).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let permuted: Vec<f64> = perm.iter().map(|&j| q[j]).collect();
                let mut a = vec![0.0; q.len()];
                let mut b = vec![0.0; q.len()];
                cfg.score_all(&q, u, &mut a);
                cfg.score_all(&permuted, u, &mut b);
                for (i, &j) in perm.iter().enumerate() {
                    prop_assert!((b[i] - a[j]).abs() <= 1e-12);
                }
            }
        }
    }
}
