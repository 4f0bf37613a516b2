//! Unseen-class scoring and detection metrics.
//!
//! All scores are oriented so that larger means more likely
//! out-of-distribution, regardless of whether the underlying quantity is a
//! distance or a similarity. That keeps AUROC and F1 scorer-agnostic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Out-of-distribution score; larger = more likely an unseen class.
pub type OodScore = f64;

/// Metric for minimum-distance scoring against class representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MdtMetric {
    Euclidean,
    #[default]
    Cosine,
}

/// Which unseen-class scorer a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OodScorerKind {
    /// One minus the maximum softmax probability.
    MaxSoftmax,
    /// Minimum distance (or negated maximum similarity) to all class
    /// representations.
    Mdt { metric: MdtMetric },
}

/// Minimum distance from `x` to the class representations; for similarity
/// metrics the negated maximum similarity, so larger stays "farther from
/// every class".
pub fn mdt_score(reps: &[Vec<f64>], x: &[f64], metric: MdtMetric) -> Result<OodScore> {
    if reps.is_empty() {
        return Err(Error::EmptyInput("no class representations"));
    }
    let score = match metric {
        MdtMetric::Euclidean => reps
            .iter()
            .map(|c| linalg::euclidean(c, x))
            .fold(f64::INFINITY, f64::min),
        MdtMetric::Cosine => {
            -reps
                .iter()
                .map(|c| linalg::cosine(c, x))
                .fold(f64::NEG_INFINITY, f64::max)
        }
    };
    Ok(score)
}

/// `1 - max_i p_i`: low confidence reads as out-of-distribution.
pub fn max_softmax_score(probs: &[f64]) -> Result<OodScore> {
    if probs.is_empty() {
        return Err(Error::EmptyInput("empty probability vector"));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::NotNormalized(sum));
    }
    let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(1.0 - max)
}

/// Area under the ROC curve: the probability that a random unseen-class
/// score ranks above a random seen-class score, ties counting half.
/// Computed by the rank method, algebraically equal to exhaustive pair
/// counting.
pub fn auroc(scores: &[f64], unseen: &[bool]) -> Result<f64> {
    if scores.len() != unseen.len() {
        return Err(Error::ShapeMismatch {
            expected: scores.len(),
            got: unseen.len(),
        });
    }
    let n_pos = unseen.iter().filter(|&&u| u).count();
    let n_neg = unseen.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleLabel);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Average ranks over tie groups, then sum positive ranks (Mann-Whitney).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if unseen[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Best-threshold F1 with unseen as the positive class.
///
/// Sweeps every distinct score (predict positive iff score >= threshold)
/// plus one threshold above the maximum; returns the maximizing
/// `(threshold, f1)`, preferring the lowest threshold on ties.
pub fn best_f1(scores: &[f64], unseen: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != unseen.len() {
        return Err(Error::ShapeMismatch {
            expected: scores.len(),
            got: unseen.len(),
        });
    }
    let n_pos = unseen.iter().filter(|&&u| u).count();
    if n_pos == 0 {
        return Err(Error::EmptyInput("no positive (unseen) labels"));
    }

    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let above_max = thresholds.last().unwrap() + 1.0;
    thresholds.push(above_max);

    let mut best = (above_max, 0.0f64);
    for &t in &thresholds {
        let f1 = f1_at_threshold(scores, unseen, t, n_pos);
        if f1 > best.1 || (f1 == best.1 && t < best.0) {
            best = (t, f1);
        }
    }
    Ok(best)
}

fn f1_at_threshold(scores: &[f64], unseen: &[bool], t: f64, n_pos: usize) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    for (&s, &u) in scores.iter().zip(unseen) {
        if s >= t {
            if u {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let fn_ = n_pos - tp;
    if 2 * tp + fp + fn_ == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// One point of the ROC curve.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC curve points (fpr, tpr, threshold) from the most conservative
/// threshold to the most permissive, suitable for CSV export.
pub fn roc_points(scores: &[f64], unseen: &[bool]) -> Result<Vec<RocPoint>> {
    if scores.len() != unseen.len() {
        return Err(Error::ShapeMismatch {
            expected: scores.len(),
            got: unseen.len(),
        });
    }
    let n_pos = unseen.iter().filter(|&&u| u).count();
    let n_neg = unseen.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleLabel);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if unseen[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
            threshold: t,
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// O(n^2) pair-counting oracle with half credit for ties.
    fn auroc_pairwise(scores: &[f64], unseen: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            if !unseen[i] {
                continue;
            }
            for j in 0..scores.len() {
                if unseen[j] {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn mdt_zero_for_exact_match_and_min_over_reps() {
        let reps = vec![vec![1.0, 0.0], vec![4.0, 0.0]];
        assert_eq!(
            mdt_score(&reps, &[1.0, 0.0], MdtMetric::Euclidean).unwrap(),
            0.0
        );
        let single = vec![vec![3.0, 0.0]];
        assert_eq!(
            mdt_score(&single, &[0.0, 0.0], MdtMetric::Euclidean).unwrap(),
            3.0
        );
        assert!(mdt_score(&[], &[0.0], MdtMetric::Euclidean).is_err());
    }

    #[test]
    fn mdt_matches_exhaustive_min_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let reps: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let x: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let got = mdt_score(&reps, &x, MdtMetric::Euclidean).unwrap();
        let want = reps
            .iter()
            .map(|c| {
                c.iter()
                    .zip(&x)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        assert_eq!(got, want);
    }

    #[test]
    fn mdt_cosine_negates_max_similarity() {
        let reps = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let score = mdt_score(&reps, &[2.0, 0.0], MdtMetric::Cosine).unwrap();
        assert!((score + 1.0).abs() < 1e-12);
    }

    #[test]
    fn max_softmax_examples() {
        assert_eq!(max_softmax_score(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let k = 4;
        let uniform = vec![1.0 / k as f64; k];
        assert!((max_softmax_score(&uniform).unwrap() - (1.0 - 0.25)).abs() < 1e-12);
        assert!((max_softmax_score(&[0.7, 0.2, 0.1]).unwrap() - 0.3).abs() < 1e-12);
        assert!(matches!(
            max_softmax_score(&[0.5, 0.2]),
            Err(Error::NotNormalized(_))
        ));
    }

    #[test]
    fn auroc_perfect_separation_and_pure_ties() {
        let scores = [5.0, 4.0, 1.0, 0.5];
        let labels = [true, true, false, false];
        assert_eq!(auroc(&scores, &labels).unwrap(), 1.0);

        let tied = [2.0, 2.0, 2.0, 2.0];
        assert_eq!(auroc(&tied, &labels).unwrap(), 0.5);

        assert!(matches!(
            auroc(&[1.0, 2.0], &[true, true]),
            Err(Error::SingleLabel)
        ));
    }

    #[test]
    fn auroc_matches_pairwise_oracle_exactly_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = 10;
            // Coarse grid of values forces tie groups.
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..5)) as f64).collect();
            let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
            let got = auroc(&scores, &labels).unwrap();
            let want = auroc_pairwise(&scores, &labels);
            assert_eq!(got, want, "rank method diverged from pair counting");
        }
    }

    #[test]
    fn best_f1_perfect_separation_hits_one() {
        let scores = [9.0, 8.0, 1.0, 0.0];
        let labels = [true, true, false, false];
        let (_, f1) = best_f1(&scores, &labels).unwrap();
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn best_f1_beats_the_predict_everything_baseline() {
        // 1 positive among 10: predicting everything positive scores
        // 2 * 0.1 / 1.1 = 0.1818...; the sweep must beat or match it.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let scores: Vec<f64> = (0..10).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let labels: Vec<bool> = (0..10).map(|i| i == 3).collect();
        let (_, f1) = best_f1(&scores, &labels).unwrap();
        let baseline = 2.0 * (1.0 * 0.1) / (1.0 + 0.1);
        assert!(f1 >= baseline - 1e-12, "f1 {f1} below baseline {baseline}");
    }

    #[test]
    fn best_f1_dominates_every_swept_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..40).map(|_| (rng.random_range(0..7)) as f64).collect();
        let labels: Vec<bool> = (0..40).map(|i| i % 4 == 0).collect();
        let n_pos = labels.iter().filter(|&&u| u).count();
        let (_, best) = best_f1(&scores, &labels).unwrap();
        // Exhaustive sweep oracle over all candidate thresholds.
        let mut cands = scores.clone();
        cands.push(f64::MAX);
        for t in cands {
            assert!(best >= f1_at_threshold(&scores, &labels, t, n_pos) - 1e-15);
        }
    }

    #[test]
    fn roc_points_start_at_origin_and_end_at_one_one() {
        let scores = [3.0, 2.0, 2.0, 1.0];
        let labels = [true, false, true, false];
        let pts = roc_points(&scores, &labels).unwrap();
        assert_eq!(pts.first().unwrap().fpr, 0.0);
        assert_eq!(pts.first().unwrap().tpr, 0.0);
        assert_eq!(pts.last().unwrap().fpr, 1.0);
        assert_eq!(pts.last().unwrap().tpr, 1.0);
    }

    fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
        // Gram-Schmidt on a random Gaussian matrix.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for b in &basis {
                let proj = crate::linalg::dot(&v, b);
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= proj * bi;
                }
            }
            let n = crate::linalg::norm(&v);
            if n > 1e-6 {
                for vi in &mut v {
                    *vi /= n;
                }
                basis.push(v);
            }
        }
        basis
    }

    fn rotate(rot: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        rot.iter().map(|row| crate::linalg::dot(row, x)).collect()
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_increasing_transforms(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 30;
            let scores: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
            prop_assume!(labels.iter().any(|&u| u) && labels.iter().any(|&u| !u));

            let transformed: Vec<f64> = scores.iter().map(|s| (s * 0.5).exp() + 3.0).collect();
            let a = auroc(&scores, &labels).unwrap();
            let b = auroc(&transformed, &labels).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn auroc_complement_identity_without_ties(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 25;
            let scores: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
            let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
            let a = auroc(&scores, &labels).unwrap();
            let b = auroc(&negated, &labels).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn mdt_euclidean_is_rotation_invariant(seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 4;
            let reps: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            let x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let rot = random_rotation(&mut rng, d);
            let reps_rot: Vec<Vec<f64>> = reps.iter().map(|r| rotate(&rot, r)).collect();
            let x_rot = rotate(&rot, &x);
            let a = mdt_score(&reps, &x, MdtMetric::Euclidean).unwrap();
            let b = mdt_score(&reps_rot, &x_rot, MdtMetric::Euclidean).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
