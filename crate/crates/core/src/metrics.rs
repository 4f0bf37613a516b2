//! Metric suite computed from an evaluation log.
//!
//! A step counts as correct iff the predicted class equals the true class.
//! A sample whose class was unseen at prediction time cannot be predicted
//! and therefore counts as incorrect; this keeps accuracy comparable across
//! learners.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassId;
use crate::error::{Error, Result};
use crate::harness::EvalRecord;
use crate::ood;
use crate::sequence::Bucket;

pub const DEFAULT_ROLLING_WINDOW: usize = 1_000;

/// The per-run metric report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub overall_accuracy: f64,
    pub mean_per_class: f64,
    pub bucket_accuracies: BTreeMap<Bucket, f64>,
    /// None when the log has no unseen (or no seen) steps.
    pub unseen_auroc: Option<f64>,
    pub total_gmacs: f64,
    pub rolling: Vec<(usize, f64)>,
}

fn correct(rec: &EvalRecord) -> bool {
    rec.predicted_class == Some(rec.true_class)
}

/// Fraction of steps predicted correctly.
pub fn overall_accuracy(log: &[EvalRecord]) -> Result<f64> {
    if log.is_empty() {
        return Err(Error::EmptyInput("empty evaluation log"));
    }
    let hits = log.iter().filter(|r| correct(r)).count();
    Ok(hits as f64 / log.len() as f64)
}

fn per_class_tallies(log: &[EvalRecord]) -> BTreeMap<ClassId, (usize, usize)> {
    let mut tally: BTreeMap<ClassId, (usize, usize)> = BTreeMap::new();
    for rec in log {
        let entry = tally.entry(rec.true_class).or_default();
        entry.1 += 1;
        if correct(rec) {
            entry.0 += 1;
        }
    }
    tally
}

/// Unweighted mean of per-class accuracies over classes that appear.
pub fn mean_per_class(log: &[EvalRecord]) -> Result<f64> {
    if log.is_empty() {
        return Err(Error::EmptyInput("empty evaluation log"));
    }
    let tally = per_class_tallies(log);
    let sum: f64 = tally.values().map(|&(h, n)| h as f64 / n as f64).sum();
    Ok(sum / tally.len() as f64)
}

/// Per-bucket unweighted mean of per-class accuracies. Buckets with no
/// logged class are absent from the result, not zero.
pub fn cross_sectional(
    log: &[EvalRecord],
    buckets: &BTreeMap<ClassId, Bucket>,
) -> Result<BTreeMap<Bucket, f64>> {
    if log.is_empty() {
        return Err(Error::EmptyInput("empty evaluation log"));
    }
    let tally = per_class_tallies(log);
    let mut acc: BTreeMap<Bucket, (f64, usize)> = BTreeMap::new();
    for (&class, &(hits, total)) in &tally {
        let bucket = buckets
            .get(&class)
            .copied()
            .ok_or(Error::UnknownClass(class.0))?;
        let entry = acc.entry(bucket).or_insert((0.0, 0));
        entry.0 += hits as f64 / total as f64;
        entry.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(b, (sum, n))| (b, sum / n as f64))
        .collect())
}

/// AUROC of the logged OOD scores against the unseen flags.
pub fn unseen_auroc(log: &[EvalRecord]) -> Result<f64> {
    let scores: Vec<f64> = log.iter().map(|r| r.ood_score).collect();
    let labels: Vec<bool> = log.iter().map(|r| r.unseen).collect();
    ood::auroc(&scores, &labels)
}

/// Trailing-window accuracy: one point per step from `window - 1` on,
/// keyed by the 0-based end step of the window.
pub fn rolling_accuracy(log: &[EvalRecord], window: usize) -> Result<Vec<(usize, f64)>> {
    if window < 1 {
        return Err(Error::InvalidSpec("window must be >= 1".into()));
    }
    if window > log.len() {
        return Err(Error::WindowTooLarge {
            window,
            len: log.len(),
        });
    }
    let mut points = Vec::with_capacity(log.len() - window + 1);
    let mut in_window = 0usize;
    for (i, rec) in log.iter().enumerate() {
        if correct(rec) {
            in_window += 1;
        }
        if i + 1 > window && correct(&log[i - window]) {
            in_window -= 1;
        }
        if i + 1 >= window {
            points.push((i, in_window as f64 / window as f64));
        }
    }
    Ok(points)
}

/// Computes the full report. The rolling window shrinks to the log length
/// when the log is shorter than the requested window.
pub fn report(
    log: &[EvalRecord],
    buckets: &BTreeMap<ClassId, Bucket>,
    mac_total: u64,
    rolling_window: usize,
) -> Result<MetricReport> {
    let window = rolling_window.min(log.len()).max(1);
    Ok(MetricReport {
        overall_accuracy: overall_accuracy(log)?,
        mean_per_class: mean_per_class(log)?,
        bucket_accuracies: cross_sectional(log, buckets)?,
        unseen_auroc: unseen_auroc(log).ok(),
        total_gmacs: mac_total as f64 / 1e9,
        rolling: rolling_accuracy(log, window)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(step: usize, class: u32, predicted: Option<u32>, unseen: bool, score: f64) -> EvalRecord {
        EvalRecord {
            step,
            true_class: ClassId(class),
            predicted_class: predicted.map(ClassId),
            unseen,
            ood_score: score,
            known_count: 1,
        }
    }

    #[test]
    fn overall_accuracy_counts_hits() {
        let log: Vec<EvalRecord> = (0..10)
            .map(|i| rec(i, 0, Some(if i % 2 == 0 { 0 } else { 1 }), false, 0.0))
            .collect();
        assert_eq!(overall_accuracy(&log).unwrap(), 0.5);

        let perfect: Vec<EvalRecord> = (0..4).map(|i| rec(i, 1, Some(1), false, 0.0)).collect();
        assert_eq!(overall_accuracy(&perfect).unwrap(), 1.0);
        assert!(overall_accuracy(&[]).is_err());
    }

    #[test]
    fn mean_per_class_is_unweighted() {
        // Class 0: 3/4 correct; class 1: 1/2 correct.
        let mut log = Vec::new();
        for i in 0..4 {
            log.push(rec(i, 0, Some(if i < 3 { 0 } else { 9 }), false, 0.0));
        }
        for i in 4..6 {
            log.push(rec(i, 1, Some(if i == 4 { 1 } else { 9 }), false, 0.0));
        }
        assert_eq!(mean_per_class(&log).unwrap(), 0.625);
    }

    #[test]
    fn balanced_classes_make_both_accuracies_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut log = Vec::new();
        for i in 0..60 {
            let c = (i % 3) as u32;
            let hit = rng.random::<bool>();
            log.push(rec(i, c, Some(if hit { c } else { c + 10 }), false, 0.0));
        }
        let overall = overall_accuracy(&log).unwrap();
        let mpc = mean_per_class(&log).unwrap();
        assert!((overall - mpc).abs() < 1e-12);
    }

    #[test]
    fn mean_per_class_matches_tally_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut log = Vec::new();
        for i in 0..200 {
            let c = rng.random_range(0..5u32);
            let hit = rng.random::<bool>();
            log.push(rec(i, c, Some(if hit { c } else { 99 }), false, 0.0));
        }
        // Oracle: tally per class by brute force.
        let mut hits = [0f64; 5];
        let mut totals = [0f64; 5];
        for r in &log {
            totals[r.true_class.index()] += 1.0;
            if r.predicted_class == Some(r.true_class) {
                hits[r.true_class.index()] += 1.0;
            }
        }
        let want: f64 = (0..5).map(|c| hits[c] / totals[c]).sum::<f64>() / 5.0;
        assert!((mean_per_class(&log).unwrap() - want).abs() < 1e-12);
    }

    fn four_bucket_fixture() -> (Vec<EvalRecord>, BTreeMap<ClassId, Bucket>) {
        let mut log = Vec::new();
        let mut buckets = BTreeMap::new();
        let spec = [
            (0u32, Bucket::NovelHead, 4usize, 4usize),
            (1, Bucket::NovelTail, 1, 2),
            (2, Bucket::PretrainHead, 3, 4),
            (3, Bucket::PretrainTail, 0, 2),
        ];
        let mut step = 0;
        for &(c, bucket, hits, total) in &spec {
            buckets.insert(ClassId(c), bucket);
            for i in 0..total {
                log.push(rec(step, c, Some(if i < hits { c } else { 77 }), false, 0.0));
                step += 1;
            }
        }
        (log, buckets)
    }

    #[test]
    fn cross_sectional_matches_per_bucket_oracle() {
        let (log, buckets) = four_bucket_fixture();
        let acc = cross_sectional(&log, &buckets).unwrap();
        assert_eq!(acc[&Bucket::NovelHead], 1.0);
        assert_eq!(acc[&Bucket::NovelTail], 0.5);
        assert_eq!(acc[&Bucket::PretrainHead], 0.75);
        assert_eq!(acc[&Bucket::PretrainTail], 0.0);
    }

    #[test]
    fn single_bucket_equals_mean_per_class_and_empty_buckets_are_absent() {
        let mut log = Vec::new();
        let mut buckets = BTreeMap::new();
        for c in 0..3u32 {
            buckets.insert(ClassId(c), Bucket::NovelHead);
            for i in 0..3 {
                log.push(rec(0, c, Some(if i == 0 { c } else { 50 }), false, 0.0));
            }
        }
        let acc = cross_sectional(&log, &buckets).unwrap();
        assert_eq!(acc.len(), 1);
        assert!((acc[&Bucket::NovelHead] - mean_per_class(&log).unwrap()).abs() < 1e-12);

        // A perfect singleton bucket scores exactly 1.0.
        let (log4, buckets4) = four_bucket_fixture();
        assert_eq!(cross_sectional(&log4, &buckets4).unwrap()[&Bucket::NovelHead], 1.0);
    }

    #[test]
    fn unbucketed_class_is_an_error() {
        let log = vec![rec(0, 9, Some(9), false, 0.0)];
        let buckets = BTreeMap::new();
        assert!(matches!(
            cross_sectional(&log, &buckets),
            Err(Error::UnknownClass(9))
        ));
    }

    #[test]
    fn bucket_means_weighted_by_class_counts_recover_mean_per_class() {
        // Multiple classes per bucket: the bucket means, weighted by how
        // many classes each bucket holds, must average back to the
        // unweighted per-class mean.
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut log = Vec::new();
        let mut buckets = BTreeMap::new();
        let all = [
            Bucket::NovelHead,
            Bucket::NovelTail,
            Bucket::PretrainHead,
            Bucket::PretrainTail,
        ];
        for c in 0..9u32 {
            buckets.insert(ClassId(c), all[(c % 4) as usize]);
            let total = 2 + rng.random_range(0..5);
            for i in 0..total {
                let hit = rng.random::<bool>();
                log.push(rec(i, c, Some(if hit { c } else { 99 }), false, 0.0));
            }
        }
        let acc = cross_sectional(&log, &buckets).unwrap();
        let mut class_count: BTreeMap<Bucket, usize> = BTreeMap::new();
        for bucket in buckets.values() {
            *class_count.entry(*bucket).or_default() += 1;
        }
        let weighted: f64 = acc
            .iter()
            .map(|(b, a)| a * class_count[b] as f64)
            .sum::<f64>()
            / buckets.len() as f64;
        assert!((weighted - mean_per_class(&log).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn unseen_auroc_reads_the_log() {
        let log = vec![
            rec(0, 0, Some(0), false, 0.1),
            rec(1, 1, None, true, 0.9),
            rec(2, 0, Some(0), false, 0.2),
            rec(3, 2, None, true, 0.8),
        ];
        assert_eq!(unseen_auroc(&log).unwrap(), 1.0);

        let constant: Vec<EvalRecord> = (0..6)
            .map(|i| rec(i, 0, Some(0), i % 2 == 0, 0.5))
            .collect();
        assert_eq!(unseen_auroc(&constant).unwrap(), 0.5);
    }

    #[test]
    fn rolling_window_equal_to_length_gives_overall_accuracy() {
        let log: Vec<EvalRecord> = (0..8)
            .map(|i| rec(i, 0, Some(if i < 6 { 0 } else { 1 }), false, 0.0))
            .collect();
        let points = rolling_accuracy(&log, 8).unwrap();
        assert_eq!(points.len(), 1);
        assert_eq!(points[0], (7, overall_accuracy(&log).unwrap()));

        let all_correct: Vec<EvalRecord> = (0..5).map(|i| rec(i, 0, Some(0), false, 0.0)).collect();
        for (_, acc) in rolling_accuracy(&all_correct, 2).unwrap() {
            assert_eq!(acc, 1.0);
        }

        assert!(matches!(
            rolling_accuracy(&log, 9),
            Err(Error::WindowTooLarge { .. })
        ));
    }

    #[test]
    fn rolling_matches_sliding_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let log: Vec<EvalRecord> = (0..50)
            .map(|i| {
                let hit = rng.random::<bool>();
                rec(i, 0, Some(if hit { 0 } else { 1 }), false, 0.0)
            })
            .collect();
        let window = 3;
        let got = rolling_accuracy(&log, window).unwrap();
        for (end, acc) in got {
            let hits = log[end + 1 - window..=end]
                .iter()
                .filter(|r| r.predicted_class == Some(r.true_class))
                .count();
            assert_eq!(acc, hits as f64 / window as f64);
        }
    }

    #[test]
    fn report_round_trips_through_ndjson_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut buckets = BTreeMap::new();
        let log: Vec<EvalRecord> = (0..40)
            .map(|i| {
                let c = rng.random_range(0..4u32);
                buckets.entry(ClassId(c)).or_insert(Bucket::NovelTail);
                let hit = rng.random::<bool>();
                EvalRecord {
                    step: i,
                    true_class: ClassId(c),
                    predicted_class: Some(ClassId(if hit { c } else { (c + 1) % 4 })),
                    unseen: i % 7 == 0,
                    ood_score: rng.random::<f64>(),
                    known_count: 4,
                }
            })
            .collect();
        let direct = report(&log, &buckets, 123_456_789, 10).unwrap();

        let mut buf = Vec::new();
        crate::harness::write_ndjson(&log, &mut buf).unwrap();
        let reread = crate::harness::read_ndjson(buf.as_slice()).unwrap();
        let recomputed = report(&reread, &buckets, 123_456_789, 10).unwrap();
        assert_eq!(direct, recomputed);
        assert_eq!(
            serde_json::to_string(&direct).unwrap(),
            serde_json::to_string(&recomputed).unwrap()
        );
    }

    #[test]
    fn report_total_gmacs_scales_meter_total() {
        let log = vec![rec(0, 0, Some(0), false, 0.0), rec(1, 1, None, true, 1.0)];
        let mut buckets = BTreeMap::new();
        buckets.insert(ClassId(0), Bucket::PretrainHead);
        buckets.insert(ClassId(1), Bucket::NovelTail);
        let rep = report(&log, &buckets, 2_500_000_000, 10).unwrap();
        assert!((rep.total_gmacs - 2.5).abs() < 1e-12);
        assert_eq!(rep.unseen_auroc, Some(1.0));
    }
}
