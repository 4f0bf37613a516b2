//! Heavy-tailed stream construction and cross-sectional class buckets.
//!
//! Class counts follow a Zipf profile: the rank-r class receives a share
//! proportional to `r^(-s)`, rounded by the largest-remainder method so the
//! counts sum exactly to the requested total. When a class runs out of
//! samples its count is capped and the deficit redistributed down the rank
//! order.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, ClassRole, Dataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SequenceSpec {
    pub num_classes: usize,
    #[serde(default = "default_zipf_s")]
    pub zipf_s: f64,
    pub total_samples: usize,
    #[serde(default = "default_head_threshold")]
    pub head_threshold: usize,
    pub seed: u64,
}

fn default_zipf_s() -> f64 {
    1.0
}

fn default_head_threshold() -> usize {
    50
}

impl SequenceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(Error::InvalidSpec("num_classes must be >= 1".into()));
        }
        if self.total_samples < self.num_classes {
            return Err(Error::InvalidSpec(
                "total_samples must be >= num_classes".into(),
            ));
        }
        if self.zipf_s.is_nan() || self.zipf_s <= 0.0 {
            return Err(Error::InvalidSpec("zipf_s must be > 0".into()));
        }
        Ok(())
    }
}

/// Cross-sectional class bucket: pretrain/novel crossed with head/tail.
/// A class is Head iff its stream count exceeds the head threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bucket {
    NovelHead,
    NovelTail,
    PretrainHead,
    PretrainTail,
}

pub fn bucket_of(count: usize, role: ClassRole, head_threshold: usize) -> Bucket {
    match (role, count > head_threshold) {
        (ClassRole::Novel, true) => Bucket::NovelHead,
        (ClassRole::Novel, false) => Bucket::NovelTail,
        (ClassRole::Pretrain, true) => Bucket::PretrainHead,
        (ClassRole::Pretrain, false) => Bucket::PretrainTail,
    }
}

/// An ordered stream of dataset sample indices plus per-class metadata.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StreamTask {
    pub order: Vec<usize>,
    pub class_counts: BTreeMap<ClassId, usize>,
    pub buckets: BTreeMap<ClassId, Bucket>,
}

impl StreamTask {
    /// Checks internal consistency and consistency against a dataset.
    pub fn validate(&self, dataset: &Dataset, head_threshold: usize) -> Result<()> {
        let total: usize = self.class_counts.values().sum();
        if total != self.order.len() {
            return Err(Error::InvalidSpec(format!(
                "class counts sum to {total} but order has {} entries",
                self.order.len()
            )));
        }
        let mut seen: BTreeMap<ClassId, usize> = BTreeMap::new();
        for &idx in &self.order {
            let sample = dataset
                .sample(idx)
                .ok_or_else(|| Error::InvalidSpec(format!("sample index {idx} out of range")))?;
            *seen.entry(sample.label).or_default() += 1;
        }
        if seen != self.class_counts {
            return Err(Error::InvalidSpec(
                "order labels disagree with class_counts".into(),
            ));
        }
        for (&class, &count) in &self.class_counts {
            let role = dataset.role(class).ok_or(Error::MissingRole(class.0))?;
            let expected = bucket_of(count, role, head_threshold);
            if self.buckets.get(&class) != Some(&expected) {
                return Err(Error::InvalidSpec(format!(
                    "bucket for class {class} inconsistent with its count and role"
                )));
            }
        }
        if self.buckets.len() != self.class_counts.len() {
            return Err(Error::InvalidSpec(
                "buckets and class_counts cover different classes".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Integer class counts per rank (rank 1 first): shares proportional to
/// `r^(-s)`, largest-remainder rounding, summing exactly to `total`.
pub fn zipf_targets(num_classes: usize, s: f64, total: usize) -> Vec<usize> {
    let weights: Vec<f64> = (1..=num_classes).map(|r| (r as f64).powf(-s)).collect();
    let norm: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / norm).collect();
    let mut targets: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = targets.iter().sum();
    let mut remainder: Vec<(usize, f64)> = exact
        .iter()
        .enumerate()
        .map(|(i, e)| (i, e - e.floor()))
        .collect();
    remainder.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(i, _) in remainder.iter().take(total - assigned) {
        targets[i] += 1;
    }
    targets
}

/// Builds a stream over `dataset`'s streamable samples.
///
/// Ranks are assigned to classes uniformly at random, per-class sample
/// subsets are drawn without replacement, targets that exceed a class's
/// availability are capped with the deficit pushed to later ranks, and the
/// final order is a uniform shuffle. Fully deterministic under `spec.seed`.
pub fn build_sequence(dataset: &Dataset, spec: &SequenceSpec) -> Result<StreamTask> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut classes: Vec<ClassId> = dataset.stream_pool().keys().copied().collect();
    if classes.len() < spec.num_classes {
        return Err(Error::InvalidSpec(format!(
            "dataset has {} streamable classes, spec wants {}",
            classes.len(),
            spec.num_classes
        )));
    }
    classes.shuffle(&mut rng);
    let ranked: Vec<ClassId> = classes.into_iter().take(spec.num_classes).collect();

    let targets = zipf_targets(spec.num_classes, spec.zipf_s, spec.total_samples);
    let avail: Vec<usize> = ranked
        .iter()
        .map(|c| dataset.stream_pool()[c].len())
        .collect();

    // Forward pass: cap at availability, pushing any deficit to later ranks;
    // then sweep again over remaining capacity until placed or exhausted.
    let mut counts = vec![0usize; spec.num_classes];
    let mut carry = 0usize;
    for r in 0..spec.num_classes {
        let want = targets[r] + carry;
        counts[r] = want.min(avail[r]);
        carry = want - counts[r];
    }
    while carry > 0 {
        let mut placed_any = false;
        for r in 0..spec.num_classes {
            if carry == 0 {
                break;
            }
            let room = avail[r] - counts[r];
            if room > 0 {
                let add = room.min(carry);
                counts[r] += add;
                carry -= add;
                placed_any = true;
            }
        }
        if !placed_any {
            return Err(Error::InsufficientData(format!(
                "only {} streamable samples available for a {}-sample sequence",
                spec.total_samples - carry,
                spec.total_samples
            )));
        }
    }

    let mut order = Vec::with_capacity(spec.total_samples);
    let mut class_counts = BTreeMap::new();
    let mut buckets = BTreeMap::new();
    for (r, &class) in ranked.iter().enumerate() {
        let count = counts[r];
        if count == 0 {
            continue;
        }
        let pool = &dataset.stream_pool()[&class];
        let chosen = pool.choose_multiple(&mut rng, count);
        order.extend(chosen);
        class_counts.insert(class, count);
        let role = dataset.role(class).ok_or(Error::MissingRole(class.0))?;
        buckets.insert(class, bucket_of(count, role, spec.head_threshold));
    }
    order.shuffle(&mut rng);

    Ok(StreamTask {
        order,
        class_counts,
        buckets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_gaussian, GaussianMixtureSpec, Sample};
    use proptest::prelude::*;

    fn toy_dataset(classes: usize, per_class: usize) -> Dataset {
        // All classes novel so every sample streams.
        let samples = (0..classes * per_class)
            .map(|i| Sample {
                features: vec![i as f64, 1.0],
                label: ClassId((i / per_class) as u32),
            })
            .collect();
        let roles = (0..classes)
            .map(|c| (ClassId(c as u32), ClassRole::Novel))
            .collect();
        Dataset::new(samples, 2, roles).unwrap()
    }

    #[test]
    fn zipf_rank_one_target_matches_harmonic_normalization() {
        // Independent oracle: direct harmonic summation.
        let h10: f64 = (1..=10).map(|r| 1.0 / r as f64).sum();
        assert!((h10 - 2.9289682539682538).abs() < 1e-12);
        let expected = (100.0 / h10).round() as usize;
        assert_eq!(expected, 34);

        let targets = zipf_targets(10, 1.0, 100);
        assert_eq!(targets[0], 34);
        assert_eq!(targets.iter().sum::<usize>(), 100);
    }

    #[test]
    fn single_class_gets_everything() {
        let ds = toy_dataset(1, 25);
        let task = build_sequence(
            &ds,
            &SequenceSpec {
                num_classes: 1,
                zipf_s: 1.0,
                total_samples: 20,
                head_threshold: 50,
                seed: 5,
            },
        )
        .unwrap();
        assert_eq!(task.class_counts[&ClassId(0)], 20);
        assert_eq!(task.order.len(), 20);
    }

    #[test]
    fn bucket_boundaries_follow_threshold() {
        assert_eq!(
            bucket_of(51, ClassRole::Pretrain, 50),
            Bucket::PretrainHead
        );
        assert_eq!(bucket_of(50, ClassRole::Novel, 50), Bucket::NovelTail);
        assert_eq!(bucket_of(1, ClassRole::Novel, 50), Bucket::NovelTail);
        assert_eq!(bucket_of(50, ClassRole::Pretrain, 50), Bucket::PretrainTail);
    }

    #[test]
    fn uncapped_counts_stay_within_rounding_bound_of_zipf_pmf() {
        let num_classes = 50;
        let total = 10_000;
        let targets = zipf_targets(num_classes, 1.0, total);
        let weights: Vec<f64> = (1..=num_classes).map(|r| 1.0 / r as f64).collect();
        let norm: f64 = weights.iter().sum();
        let l1: f64 = targets
            .iter()
            .zip(&weights)
            .map(|(&t, w)| (t as f64 / total as f64 - w / norm).abs())
            .sum();
        assert!(
            l1 <= num_classes as f64 / total as f64,
            "L1 distance {l1} exceeds rounding bound"
        );
    }

    #[test]
    fn shuffle_preserves_per_class_multiset() {
        let ds = toy_dataset(6, 60);
        let spec = SequenceSpec {
            num_classes: 6,
            zipf_s: 1.0,
            total_samples: 200,
            head_threshold: 10,
            seed: 11,
        };
        let task = build_sequence(&ds, &spec).unwrap();
        task.validate(&ds, spec.head_threshold).unwrap();
    }

    #[test]
    fn identical_spec_and_dataset_give_identical_tasks() {
        let ds = toy_dataset(5, 40);
        let spec = SequenceSpec {
            num_classes: 5,
            zipf_s: 1.0,
            total_samples: 150,
            head_threshold: 20,
            seed: 42,
        };
        assert_eq!(
            build_sequence(&ds, &spec).unwrap(),
            build_sequence(&ds, &spec).unwrap()
        );
    }

    #[test]
    fn capped_classes_redistribute_to_later_ranks() {
        // 4 classes x 30 samples = 120 available; rank-1 zipf target for 100
        // samples is 48 > 30, so the deficit must flow down the ranks while
        // the total stays exact.
        let ds = toy_dataset(4, 30);
        let spec = SequenceSpec {
            num_classes: 4,
            zipf_s: 1.0,
            total_samples: 100,
            head_threshold: 25,
            seed: 2,
        };
        let task = build_sequence(&ds, &spec).unwrap();
        assert_eq!(task.order.len(), 100);
        assert!(task.class_counts.values().all(|&c| c <= 30));
        task.validate(&ds, spec.head_threshold).unwrap();
    }

    #[test]
    fn exhausted_availability_is_an_error() {
        let ds = toy_dataset(3, 10);
        let spec = SequenceSpec {
            num_classes: 3,
            zipf_s: 1.0,
            total_samples: 31,
            head_threshold: 50,
            seed: 0,
        };
        assert!(matches!(
            build_sequence(&ds, &spec),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn synth_dataset_respects_stream_pool() {
        // Pretrain classes stream only their non-pool half.
        let ds = synth_gaussian(&GaussianMixtureSpec {
            num_classes: 4,
            dim: 4,
            cluster_separation: 4.0,
            samples_per_class: 20,
            pretrain_fraction: 0.5,
            seed: 9,
        })
        .unwrap();
        let spec = SequenceSpec {
            num_classes: 4,
            zipf_s: 1.0,
            total_samples: 60,
            head_threshold: 10,
            seed: 1,
        };
        let task = build_sequence(&ds, &spec).unwrap();
        for &idx in &task.order {
            assert!(!ds.pretrain_pool().contains(&idx));
        }
        task.validate(&ds, spec.head_threshold).unwrap();
    }

    #[test]
    fn reference_scale_manifest_round_trips_with_expected_statistics() {
        // A reference-scale manifest: 1000 classes, 89,921 samples, class
        // counts between 10 and 961. Exercises the JSON manifest loader at
        // realistic size; the statistics are fixed by construction.
        let num_classes = 1000usize;
        let total = 89_921usize;
        let max_count = 961usize;
        let min_count = 10usize;

        let mut counts = vec![min_count; num_classes];
        counts[0] = max_count;
        let mut remaining = total - max_count - min_count * (num_classes - 1);
        let mut r = 1;
        while remaining > 0 {
            let add = remaining.min(max_count - min_count);
            counts[r] = min_count + add;
            remaining -= add;
            r += 1;
        }

        let mut order = Vec::with_capacity(total);
        let mut class_counts = BTreeMap::new();
        let mut buckets = BTreeMap::new();
        let mut next_index = 0usize;
        for (c, &count) in counts.iter().enumerate() {
            let class = ClassId(c as u32);
            order.extend(next_index..next_index + count);
            next_index += count;
            class_counts.insert(class, count);
            buckets.insert(class, bucket_of(count, ClassRole::Novel, 50));
        }
        let task = StreamTask {
            order,
            class_counts,
            buckets,
        };

        let json = serde_json::to_string(&task).unwrap();
        let loaded: StreamTask = serde_json::from_str(&json).unwrap();
        assert_eq!(loaded, task);
        assert_eq!(loaded.len(), 89_921);
        assert_eq!(loaded.class_counts.values().min(), Some(&10));
        assert_eq!(loaded.class_counts.values().max(), Some(&961));
    }

    proptest! {
        #[test]
        fn build_sequence_is_internally_consistent(seed in 0u64..30, total in 20usize..120) {
            let ds = toy_dataset(5, 40);
            let spec = SequenceSpec {
                num_classes: 5,
                zipf_s: 1.0,
                total_samples: total,
                head_threshold: 15,
                seed,
            };
            let task = build_sequence(&ds, &spec).unwrap();
            prop_assert!(task.validate(&ds, spec.head_threshold).is_ok());
            prop_assert_eq!(task.order.len(), total);
        }
    }
}
