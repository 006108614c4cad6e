//! Set-valued and point-prediction metrics over Test pixels.
//!
//! Everything here reduces to integer counts before a single division, so
//! results do not depend on enumeration order or thread count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelGrid, PredictionSetGrid, ProbabilityGrid, Role, SplitMask};

pub const DEFAULT_MIN_BIN_COUNT: usize = 10;

/// Inclusive set-size ranges that partition `0..=K`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeBins(Vec<(usize, usize)>);

impl SizeBins {
    pub fn new(ranges: Vec<(usize, usize)>, num_classes: usize) -> Result<Self> {
        let mut next = 0;
        for &(lo, hi) in &ranges {
            if lo != next || hi < lo {
                return Err(Error::InvalidConfig(format!("size bins {ranges:?} do not partition 0..={num_classes}")));
            }
            next = hi + 1;
        }
        if next != num_classes + 1 {
            return Err(Error::InvalidConfig(format!("size bins {ranges:?} do not partition 0..={num_classes}")));
        }
        Ok(Self(ranges))
    }

    /// `{0–1}, {2–3}, {4–6}, {7–10}, {11–K}`, truncated at `K`.
    pub fn default_for(num_classes: usize) -> Self {
        let mut ranges = Vec::new();
        for (lo, hi) in [(0, 1), (2, 3), (4, 6), (7, 10), (11, usize::MAX)] {
            if lo > num_classes {
                break;
            }
            ranges.push((lo, hi.min(num_classes)));
        }
        Self(ranges)
    }

    /// Single bin spanning every size.
    pub fn single(num_classes: usize) -> Self {
        Self(vec![(0, num_classes)])
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.0
    }

    fn bin_of(&self, size: usize) -> Option<usize> {
        self.0.iter().position(|&(lo, hi)| (lo..=hi).contains(&size))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub min_size: usize,
    pub max_size: usize,
    pub count: usize,
    /// `None` for an empty bin.
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub coverage: f64,
    pub mean_size: f64,
    pub sscv: f64,
    pub oa: f64,
    pub aa: f64,
    pub n_test: usize,
    pub covered: usize,
    pub per_bin: Vec<BinReport>,
}

/// Test pixels paired with their label and set size.
fn test_entries(
    sets: &PredictionSetGrid,
    labels: Option<&LabelGrid>,
    mask: &SplitMask,
) -> Result<Vec<(usize, Option<usize>, usize)>> {
    mask.check_shape(sets.height(), sets.width(), "prediction sets")?;
    let entries = mask
        .pixels_with(Role::Test)
        .map(|p| {
            let (r, c) = (p / sets.width(), p % sets.width());
            let size = sets
                .set_size(p)
                .ok_or_else(|| Error::InvariantViolation(format!("test pixel ({r}, {c}) has no prediction set")))?;
            let label = match labels {
                Some(l) => Some(
                    l.label(p)
                        .ok_or_else(|| Error::InvariantViolation(format!("test pixel ({r}, {c}) has no label")))?,
                ),
                None => None,
            };
            Ok((p, label, size))
        })
        .collect::<Result<Vec<_>>>()?;
    if entries.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    Ok(entries)
}

fn check_label_shape(sets: &PredictionSetGrid, labels: &LabelGrid) -> Result<()> {
    if (labels.height(), labels.width()) != (sets.height(), sets.width()) {
        return Err(Error::ShapeMismatch("labels and prediction sets differ in shape".into()));
    }
    Ok(())
}

/// Fraction of Test pixels whose set holds the true label.
pub fn coverage(sets: &PredictionSetGrid, labels: &LabelGrid, mask: &SplitMask) -> Result<f64> {
    check_label_shape(sets, labels)?;
    let entries = test_entries(sets, Some(labels), mask)?;
    let covered = entries.iter().filter(|(p, y, _)| sets.contains(*p, y.unwrap())).count();
    Ok(covered as f64 / entries.len() as f64)
}

/// Mean set cardinality over Test pixels.
pub fn mean_size(sets: &PredictionSetGrid, mask: &SplitMask) -> Result<f64> {
    let entries = test_entries(sets, None, mask)?;
    let total: usize = entries.iter().map(|e| e.2).sum();
    Ok(total as f64 / entries.len() as f64)
}

fn binned(
    sets: &PredictionSetGrid,
    labels: &LabelGrid,
    mask: &SplitMask,
    bins: &SizeBins,
) -> Result<Vec<(usize, usize)>> {
    check_label_shape(sets, labels)?;
    let mut tallies = vec![(0usize, 0usize); bins.ranges().len()];
    for (p, y, size) in test_entries(sets, Some(labels), mask)? {
        let b = bins
            .bin_of(size)
            .ok_or_else(|| Error::InvalidConfig(format!("set size {size} falls outside every bin")))?;
        tallies[b].0 += 1;
        tallies[b].1 += sets.contains(p, y.unwrap()) as usize;
    }
    Ok(tallies)
}

/// Size-stratified coverage violation, in percentage points.
///
/// Bins with fewer than `min_bin_count` members are skipped; with no
/// qualifying bin the result is 0.
pub fn sscv(
    sets: &PredictionSetGrid,
    labels: &LabelGrid,
    mask: &SplitMask,
    alpha: f64,
    bins: &SizeBins,
    min_bin_count: usize,
) -> Result<f64> {
    let floor = min_bin_count.max(1);
    Ok(binned(sets, labels, mask, bins)?
        .into_iter()
        .filter(|&(count, _)| count >= floor)
        .map(|(count, covered)| 100.0 * ((1.0 - alpha) - covered as f64 / count as f64).abs())
        .fold(0.0, f64::max))
}

/// Overall accuracy and class-averaged recall of the argmax predictions.
///
/// Classes without Test pixels are left out of the average.
pub fn oa_aa(probs: &ProbabilityGrid, labels: &LabelGrid, mask: &SplitMask) -> Result<(f64, f64)> {
    mask.check_shape(probs.height(), probs.width(), "probability grid")?;
    let k = probs.num_classes();
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for p in mask.pixels_with(Role::Test) {
        let y = labels.label(p).ok_or_else(|| {
            Error::InvariantViolation(format!("test pixel ({}, {}) has no label", p / probs.width(), p % probs.width()))
        })?;
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        totals[y] += 1;
        hits[y] += (probs.argmax(p) == y) as usize;
    }
    let n: usize = totals.iter().sum();
    if n == 0 {
        return Err(Error::EmptyTestSet);
    }
    let oa = hits.iter().sum::<usize>() as f64 / n as f64;
    let recalls: Vec<f64> = hits
        .iter()
        .zip(&totals)
        .filter(|(_, &t)| t > 0)
        .map(|(&h, &t)| h as f64 / t as f64)
        .collect();
    let aa = recalls.iter().sum::<f64>() / recalls.len() as f64;
    Ok((oa, aa))
}

/// All metrics at once.
pub fn evaluate(
    sets: &PredictionSetGrid,
    probs: &ProbabilityGrid,
    labels: &LabelGrid,
    mask: &SplitMask,
    alpha: f64,
    bins: &SizeBins,
    min_bin_count: usize,
) -> Result<MetricReport> {
    let tallies = binned(sets, labels, mask, bins)?;
    let n_test: usize = tallies.iter().map(|t| t.0).sum();
    let covered: usize = tallies.iter().map(|t| t.1).sum();
    let (oa, aa) = oa_aa(probs, labels, mask)?;
    let per_bin = bins
        .ranges()
        .iter()
        .zip(&tallies)
        .map(|(&(lo, hi), &(count, cov))| BinReport {
            min_size: lo,
            max_size: hi,
            count,
            coverage: (count > 0).then(|| cov as f64 / count as f64),
        })
        .collect();
    Ok(MetricReport {
        coverage: covered as f64 / n_test as f64,
        mean_size: mean_size(sets, mask)?,
        sscv: sscv(sets, labels, mask, alpha, bins, min_bin_count)?,
        oa,
        aa,
        n_test,
        covered,
        per_bin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `n` Test pixels in one row over `k` classes, sets given per pixel.
    fn fixture(k: usize, labels: &[i32], sets: &[&[usize]]) -> (PredictionSetGrid, LabelGrid, SplitMask) {
        let n = labels.len();
        let mut grid = PredictionSetGrid::empty(1, n, k);
        for (p, s) in sets.iter().enumerate() {
            grid.define(p);
            s.iter().for_each(|&y| grid.insert(p, y));
        }
        (
            grid,
            LabelGrid::new(1, n, k, labels.to_vec()).unwrap(),
            SplitMask::new(1, n, vec![Role::Test; n]).unwrap(),
        )
    }

    #[test]
    fn coverage_examples() {
        let (s, l, m) = fixture(3, &[0, 1, 2], &[&[0, 1, 2], &[0, 1, 2], &[0, 1, 2]]);
        assert_eq!(coverage(&s, &l, &m).unwrap(), 1.0);
        let (s, l, m) = fixture(3, &[0, 1, 2], &[&[], &[], &[]]);
        assert_eq!(coverage(&s, &l, &m).unwrap(), 0.0);
        let (s, l, m) = fixture(3, &[0, 1, 2, 0], &[&[0], &[1, 2], &[2], &[1]]);
        assert_eq!(coverage(&s, &l, &m).unwrap(), 0.75);
    }

    #[test]
    fn mean_size_examples() {
        let (s, _, m) = fixture(3, &[0, 0], &[&[1], &[0, 1, 2]]);
        assert_eq!(mean_size(&s, &m).unwrap(), 2.0);
        let (s, _, m) = fixture(3, &[0, 0], &[&[1], &[2]]);
        assert_eq!(mean_size(&s, &m).unwrap(), 1.0);
        let (s, _, m) = fixture(3, &[0, 0], &[&[], &[]]);
        assert_eq!(mean_size(&s, &m).unwrap(), 0.0);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        let s = PredictionSetGrid::empty(1, 1, 2);
        let m = SplitMask::new(1, 1, vec![Role::Cal]).unwrap();
        assert!(matches!(mean_size(&s, &m), Err(Error::EmptyTestSet)));
    }

    /// Builds `n` singleton sets of which `covered` hold the label.
    fn singletons(n: usize, covered: usize) -> (PredictionSetGrid, LabelGrid, SplitMask) {
        let labels = vec![0; n];
        let sets: Vec<&[usize]> = (0..n).map(|i| if i < covered { &[0][..] } else { &[1][..] }).collect();
        fixture(2, &labels, &sets)
    }

    #[test]
    fn sscv_single_bin() {
        let (s, l, m) = singletons(100, 90);
        let v = sscv(&s, &l, &m, 0.05, &SizeBins::single(2), 1).unwrap();
        assert!((v - 5.0).abs() <= 1e-12, "{v}");
        let (s, l, m) = singletons(100, 95);
        assert!(sscv(&s, &l, &m, 0.05, &SizeBins::single(2), 1).unwrap() <= 1e-12);
    }

    #[test]
    fn sscv_takes_the_worst_bin() {
        // 100 singletons at 93% coverage, 100 pairs at 99%.
        let k = 3;
        let mut labels = Vec::new();
        let mut sets: Vec<&[usize]> = Vec::new();
        for i in 0..100 {
            labels.push(0);
            sets.push(if i < 93 { &[0] } else { &[1] });
        }
        for i in 0..100 {
            labels.push(0);
            sets.push(if i < 99 { &[0, 1] } else { &[1, 2] });
        }
        let (s, l, m) = fixture(k, &labels, &sets);
        let bins = SizeBins::new(vec![(0, 1), (2, 3)], k).unwrap();
        let v = sscv(&s, &l, &m, 0.05, &bins, 10).unwrap();
        assert!((v - 4.0).abs() <= 1e-12, "{v}");
    }

    #[test]
    fn sscv_skips_sparse_bins() {
        let (s, l, m) = singletons(5, 0);
        assert_eq!(sscv(&s, &l, &m, 0.05, &SizeBins::single(2), 10).unwrap(), 0.0);
    }

    #[test]
    fn default_bins_partition_sizes() {
        assert_eq!(SizeBins::default_for(8).ranges(), &[(0, 1), (2, 3), (4, 6), (7, 8)]);
        assert_eq!(SizeBins::default_for(16).ranges(), &[(0, 1), (2, 3), (4, 6), (7, 10), (11, 16)]);
        for k in 1..30 {
            SizeBins::new(SizeBins::default_for(k).0, k).unwrap();
        }
        assert!(SizeBins::new(vec![(0, 1), (3, 4)], 4).is_err());
    }

    fn probs_for(preds: &[usize], k: usize) -> ProbabilityGrid {
        let mut v = vec![0.0; preds.len() * k];
        for (p, &y) in preds.iter().enumerate() {
            v[p * k + y] = 1.0;
        }
        ProbabilityGrid::new(1, preds.len(), k, v).unwrap()
    }

    fn accuracy(preds: &[usize], labels: &[i32]) -> (f64, f64) {
        let n = preds.len();
        let l = LabelGrid::new(1, n, 2, labels.to_vec()).unwrap();
        let m = SplitMask::new(1, n, vec![Role::Test; n]).unwrap();
        oa_aa(&probs_for(preds, 2), &l, &m).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 1], &[0, 1, 1]), (1.0, 1.0));
        // Class 0 recall 1.0, class 1 recall 0.5, two pixels each.
        assert_eq!(accuracy(&[0, 0, 1, 0], &[0, 0, 1, 1]), (0.75, 0.75));
        // 90 class-0 pixels all right, 10 class-1 pixels all wrong.
        let preds = vec![0; 100];
        let mut labels = vec![0; 90];
        labels.extend(vec![1; 10]);
        let (oa, aa) = accuracy(&preds, &labels);
        assert!((oa - 0.9).abs() <= 1e-12 && (aa - 0.5).abs() <= 1e-12);
    }
}
