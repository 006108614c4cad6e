//! Random Train / Cal / Test partitions of the labeled pixels.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{LabelGrid, Role, SplitMask};

/// Splits the labeled pixels uniformly at random.
///
/// `train_count` pixels become Train. Of the remaining `m`, `round(γ·m)`
/// become Cal (clamped so that both Cal and Test are non-empty) and the rest
/// Test. Unlabeled pixels are Ignore.
pub fn sample_split(labels: &LabelGrid, train_count: usize, cal_ratio: f64, seed: u64) -> Result<SplitMask> {
    if !(cal_ratio > 0.0 && cal_ratio < 1.0) {
        return Err(Error::InvalidConfig(format!("cal ratio must be in (0, 1), got {cal_ratio}")));
    }
    let mut labeled: Vec<usize> = (0..labels.labels().len()).filter(|&p| labels.label(p).is_some()).collect();
    let required = train_count + 2;
    if labeled.len() < required {
        return Err(Error::NotEnoughLabeledPixels { labeled: labeled.len(), required });
    }
    labeled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let m = labeled.len() - train_count;
    let n_cal = ((cal_ratio * m as f64).round() as usize).clamp(1, m - 1);
    let mut roles = vec![Role::Ignore; labels.labels().len()];
    for (i, &p) in labeled.iter().enumerate() {
        roles[p] = if i < train_count {
            Role::Train
        } else if i < train_count + n_cal {
            Role::Cal
        } else {
            Role::Test
        };
    }
    SplitMask::new(labels.height(), labels.width(), roles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::UNLABELED;

    fn labels(h: usize, w: usize) -> LabelGrid {
        LabelGrid::new(h, w, 3, (0..h * w).map(|p| (p % 3) as i32).collect()).unwrap()
    }

    #[test]
    fn counts_follow_the_ratio() {
        let mask = sample_split(&labels(10, 10), 20, 0.5, 3).unwrap();
        assert_eq!(mask.count(Role::Train), 20);
        assert_eq!(mask.count(Role::Cal), 40);
        assert_eq!(mask.count(Role::Test), 40);
        assert_eq!(mask.count(Role::Ignore), 0);
    }

    #[test]
    fn unlabeled_pixels_are_ignored() {
        let mut raw: Vec<i32> = (0..16).map(|p| p % 2).collect();
        raw[0] = UNLABELED;
        raw[5] = UNLABELED;
        let l = LabelGrid::new(4, 4, 2, raw).unwrap();
        let mask = sample_split(&l, 2, 0.5, 9).unwrap();
        assert_eq!(mask.role(0), Role::Ignore);
        assert_eq!(mask.role(5), Role::Ignore);
        assert_eq!(mask.count(Role::Ignore), 2);
    }

    #[test]
    fn extreme_ratios_keep_both_sides_non_empty() {
        let l = labels(3, 3);
        for ratio in [0.01, 0.99] {
            let mask = sample_split(&l, 0, ratio, 1).unwrap();
            assert!(mask.count(Role::Cal) >= 1 && mask.count(Role::Test) >= 1);
        }
    }

    #[test]
    fn seeded_and_sensitive_to_seed() {
        let l = labels(8, 8);
        assert_eq!(sample_split(&l, 10, 0.5, 4).unwrap(), sample_split(&l, 10, 0.5, 4).unwrap());
        assert_ne!(sample_split(&l, 10, 0.5, 4).unwrap(), sample_split(&l, 10, 0.5, 5).unwrap());
    }

    #[test]
    fn too_few_labeled_pixels() {
        let err = sample_split(&labels(2, 2), 3, 0.5, 0).unwrap_err();
        assert!(matches!(err, Error::NotEnoughLabeledPixels { labeled: 4, required: 5 }));
        assert!(sample_split(&labels(2, 2), 0, 1.0, 0).is_err());
    }
}
