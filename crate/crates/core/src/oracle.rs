//! Brute-force reference computations used to cross-check the pipeline.
//!
//! Nothing here is optimised; every quantity is computed the obvious way so
//! that it stays independent of the code paths it validates.
//!
//! Tie convention: the pairwise statistic counts `s > t` strictly, while the
//! integrated set size counts calibration scores `s ≥ t`. The closed form
//! linking them is exact only when no calibration score equals a test score;
//! [`IntegratedSize::tied_pairs`] reports how many such pairs were seen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::{aggregate, cal_scores, test_scores_all_labels, test_true_label_scores, SacpConfig};
use crate::error::{Error, Result};
use crate::grid::{LabelGrid, ProbabilityGrid, ScoreField, SplitMask};
use crate::scores::{score_field, RandomizationField, ScoreFunctionConfig};

fn non_empty(xs: &[f64]) -> Result<()> {
    if xs.is_empty() {
        Err(Error::EmptyInput)
    } else {
        Ok(())
    }
}

/// Fraction of (calibration, test) pairs with `s > t`, by double loop.
pub fn r_statistic(cal: &[f64], test: &[f64]) -> Result<f64> {
    non_empty(cal)?;
    non_empty(test)?;
    let mut greater = 0usize;
    for &s in cal {
        for &t in test {
            if s > t {
                greater += 1;
            }
        }
    }
    Ok(greater as f64 / (cal.len() as f64 * test.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratedSize {
    /// `Σ_test ∫₀¹ 1{t ≤ τ(α)} dα`, swept over the exact breakpoints.
    pub lhs: f64,
    /// `(n·N/(1+n))·R + N/(1+n)` with `N` test entries.
    pub rhs: f64,
    /// Pairs with a calibration score equal to a test score.
    pub tied_pairs: usize,
}

impl IntegratedSize {
    pub fn agrees(&self, rel_tol: f64) -> bool {
        (self.lhs - self.rhs).abs() <= rel_tol * self.lhs.abs()
    }
}

/// Threshold for level α straight from its infimum definition: the smallest
/// calibration score `s` with `#{s_i ≤ s} ≥ ⌈(n+1)(1−α)⌉`, or `+∞`.
fn threshold_by_definition(sorted_cal: &[f64], required: usize) -> f64 {
    sorted_cal
        .iter()
        .copied()
        .find(|&s| sorted_cal.partition_point(|&x| x <= s) >= required)
        .unwrap_or(f64::INFINITY)
}

/// Integrated set size and its closed form.
///
/// The set-size function of α is constant between consecutive breakpoints
/// `m/(1+n)`, so the integral is the sum over those `n + 1` intervals of the
/// set size at the interval midpoint times `1/(1+n)`.
pub fn integrated_set_size(cal: &[f64], test: &[f64]) -> Result<IntegratedSize> {
    non_empty(cal)?;
    non_empty(test)?;
    let n = cal.len();
    let mut sorted = cal.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut total_members = 0usize;
    for m in 0..=n {
        let alpha = (m as f64 + 0.5) / (n as f64 + 1.0);
        let required = ((n as f64 + 1.0) * (1.0 - alpha)).ceil() as usize;
        let tau = threshold_by_definition(&sorted, required);
        total_members += test.iter().filter(|&&t| t <= tau).count();
    }
    let lhs = total_members as f64 / (n as f64 + 1.0);

    let n_f = n as f64;
    let entries = test.len() as f64;
    let r = r_statistic(cal, test)?;
    let rhs = (n_f * entries / (1.0 + n_f)) * r + entries / (1.0 + n_f);

    let tied_pairs = cal.iter().map(|&s| test.iter().filter(|&&t| t == s).count()).sum();
    Ok(IntegratedSize { lhs, rhs, tied_pairs })
}

/// `Σ_t (1 + #{s ≥ t}) / (1 + n)`, the per-entry form of the same integral.
pub fn integrated_set_size_direct(cal: &[f64], test: &[f64]) -> Result<f64> {
    non_empty(cal)?;
    non_empty(test)?;
    let total: usize = test.iter().map(|&t| 1 + cal.iter().filter(|&&s| s >= t).count()).sum();
    Ok(total as f64 / (cal.len() as f64 + 1.0))
}

/// Probability map, labels, split and randomization shared by oracle runs.
#[derive(Debug, Clone)]
pub struct OracleFixture {
    pub grid: ProbabilityGrid,
    pub labels: LabelGrid,
    pub mask: SplitMask,
    pub rng: RandomizationField,
}

impl OracleFixture {
    /// Base scores under `cfg`, optionally followed by aggregation.
    pub fn scores(&self, cfg: &ScoreFunctionConfig, sacp: &SacpConfig) -> Result<ScoreField> {
        let base = score_field(&self.grid, &self.mask, cfg, &self.rng)?;
        aggregate(&base, &self.mask, sacp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyComparison {
    pub r_a: f64,
    pub r_b: f64,
    pub size_a: f64,
    pub size_b: f64,
    /// Whether the R ordering and the integrated-size ordering agree.
    pub holds: bool,
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Compares two score functions on one fixture by the pairwise statistic
/// and by integrated set size; they must order the two the same way.
pub fn proposition1_check<A, B>(score_a: A, score_b: B, fixture: &OracleFixture) -> Result<EfficiencyComparison>
where
    A: Fn(&OracleFixture) -> Result<ScoreField>,
    B: Fn(&OracleFixture) -> Result<ScoreField>,
{
    let summarize = |field: ScoreField| -> Result<(f64, f64)> {
        let cal = cal_scores(&field, &fixture.labels, &fixture.mask)?;
        let test = test_scores_all_labels(&field, &fixture.mask)?;
        Ok((r_statistic(&cal, &test)?, integrated_set_size(&cal, &test)?.lhs))
    };
    let (r_a, size_a) = summarize(score_a(fixture)?)?;
    let (r_b, size_b) = summarize(score_b(fixture)?)?;
    Ok(EfficiencyComparison {
        r_a,
        r_b,
        size_a,
        size_b,
        holds: sign(r_a - r_b) == sign(size_a - size_b),
    })
}

/// Two-sample permutation test on the absolute difference of means.
///
/// Returns `(1 + #{permuted ≥ observed}) / (1 + num_permutations)`.
pub fn exchangeability_permutation_test(
    cal: &[f64],
    test: &[f64],
    num_permutations: usize,
    seed: u64,
) -> Result<f64> {
    non_empty(cal)?;
    non_empty(test)?;
    let n = cal.len();
    let mut pooled: Vec<f64> = cal.iter().chain(test).copied().collect();
    let total: f64 = pooled.iter().sum();
    let size = pooled.len() as f64;
    let stat = |head_sum: f64| (head_sum / n as f64 - (total - head_sum) / (size - n as f64)).abs();
    let observed = stat(cal.iter().sum());
    let scale = pooled.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let slack = 1e-12 * scale;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extreme = 0usize;
    for _ in 0..num_permutations {
        let (head, _) = pooled.partial_shuffle(&mut rng, n);
        if stat(head.iter().sum()) >= observed - slack {
            extreme += 1;
        }
    }
    Ok((1 + extreme) as f64 / (1 + num_permutations) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub r_statistic: f64,
    pub integral_lhs: f64,
    pub integral_rhs_closed_form: f64,
    pub tied_pairs: usize,
    pub identity_holds: bool,
    pub permutation_pvalue: f64,
    pub n_cal: usize,
    pub n_test_entries: usize,
}

pub const IDENTITY_TOLERANCE: f64 = 1e-9;

/// Runs every oracle on one fixture and score configuration.
pub fn oracle_report(
    fixture: &OracleFixture,
    cfg: &ScoreFunctionConfig,
    sacp: &SacpConfig,
    num_permutations: usize,
    seed: u64,
) -> Result<OracleReport> {
    let field = fixture.scores(cfg, sacp)?;
    let cal = cal_scores(&field, &fixture.labels, &fixture.mask)?;
    let test_all = test_scores_all_labels(&field, &fixture.mask)?;
    let test_true = test_true_label_scores(&field, &fixture.labels, &fixture.mask)?;
    let integral = integrated_set_size(&cal, &test_all)?;
    Ok(OracleReport {
        r_statistic: r_statistic(&cal, &test_all)?,
        integral_lhs: integral.lhs,
        integral_rhs_closed_form: integral.rhs,
        tied_pairs: integral.tied_pairs,
        identity_holds: integral.agrees(IDENTITY_TOLERANCE),
        permutation_pvalue: exchangeability_permutation_test(&cal, &test_true, num_permutations, seed)?,
        n_cal: cal.len(),
        n_test_entries: test_all.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r_statistic_examples() {
        assert_eq!(r_statistic(&[0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(r_statistic(&[1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(r_statistic(&[1.0, 3.0], &[0.0, 2.0]).unwrap(), 0.75);
        assert!(matches!(r_statistic(&[], &[1.0]), Err(Error::EmptyInput)));
    }

    #[test]
    fn closed_form_single_calibration_score() {
        let out = integrated_set_size(&[0.9], &[0.1, 0.5]).unwrap();
        assert_eq!((out.lhs, out.rhs, out.tied_pairs), (2.0, 2.0, 0));
        let out = integrated_set_size(&[0.5], &[0.0]).unwrap();
        assert_eq!((out.lhs, out.rhs), (1.0, 1.0));
    }

    #[test]
    fn ties_break_the_closed_form() {
        // With s == t the sweep counts the tie (s >= t) while R does not (s > t).
        let out = integrated_set_size(&[0.5], &[0.5]).unwrap();
        assert_eq!((out.lhs, out.rhs, out.tied_pairs), (1.0, 0.5, 1));
        assert!(!out.agrees(IDENTITY_TOLERANCE));
    }

    #[test]
    fn sweep_matches_direct_formula_with_ties() {
        let cal = [0.1, 0.4, 0.4, 0.7, 0.9];
        let test = [0.0, 0.4, 0.5, 0.9, 1.2, 0.4];
        assert_eq!(
            integrated_set_size(&cal, &test).unwrap().lhs,
            integrated_set_size_direct(&cal, &test).unwrap()
        );
    }

    #[test]
    fn threshold_definition_matches_order_statistic() {
        let sorted = [0.1, 0.2, 0.2, 0.5];
        assert_eq!(threshold_by_definition(&sorted, 1), 0.1);
        assert_eq!(threshold_by_definition(&sorted, 2), 0.2);
        assert_eq!(threshold_by_definition(&sorted, 3), 0.2);
        assert_eq!(threshold_by_definition(&sorted, 4), 0.5);
        assert_eq!(threshold_by_definition(&sorted, 5), f64::INFINITY);
    }

    #[test]
    fn identical_samples_give_p_one() {
        let xs = [0.3, 0.1, 0.7, 0.2];
        assert_eq!(exchangeability_permutation_test(&xs, &xs, 500, 1).unwrap(), 1.0);
    }

    #[test]
    fn gross_shift_is_detected() {
        let cal: Vec<f64> = (0..200).map(|i| (i as f64 * 0.618).fract()).collect();
        let test: Vec<f64> = cal.iter().map(|x| x + 10.0).collect();
        let p = exchangeability_permutation_test(&cal, &test, 1999, 5).unwrap();
        assert!(p < 0.001, "{p}");
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn sample(max: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-5.0f64..5.0, 1..max)
        }

        proptest! {
            #[test]
            fn r_invariant_under_monotone_transform(cal in sample(30), test in sample(30)) {
                let f = |x: f64| (x * 0.7).exp() + x.powi(3);
                let cal2: Vec<f64> = cal.iter().map(|&x| f(x)).collect();
                let test2: Vec<f64> = test.iter().map(|&x| f(x)).collect();
                prop_assert_eq!(r_statistic(&cal, &test).unwrap(), r_statistic(&cal2, &test2).unwrap());
            }

            #[test]
            fn sweep_equals_direct(cal in sample(25), test in sample(40)) {
                prop_assert_eq!(
                    integrated_set_size(&cal, &test).unwrap().lhs,
                    integrated_set_size_direct(&cal, &test).unwrap()
                );
            }

            #[test]
            fn closed_form_gap_is_the_tie_count(cal in proptest::collection::vec(0u8..6, 1..20), test in proptest::collection::vec(0u8..6, 1..20)) {
                let cal: Vec<f64> = cal.into_iter().map(f64::from).collect();
                let test: Vec<f64> = test.into_iter().map(f64::from).collect();
                let out = integrated_set_size(&cal, &test).unwrap();
                let gap = (out.lhs - out.rhs) * (cal.len() as f64 + 1.0);
                prop_assert!((gap - out.tied_pairs as f64).abs() < 1e-9);
            }
        }
    }
}
