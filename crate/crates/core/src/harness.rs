//! The streaming evaluation loop.
//!
//! Each step: embed the sample, predict among the currently known classes,
//! score it for unseen-class detection, log the outcome, reveal the label,
//! admit the class if new, then let the update strategy train. Inference
//! costs A MACs and updates cost B MACs; the meter accumulates A + B per
//! step, and [`recompute_total_macs`] re-derives the same total from the log
//! alone as an independent cross-check.
//!
//! MAC conventions (declared once, applied everywhere): head scoring costs
//! `d * k` (+`d` when the input is normalized first), an MLP forward costs
//! the sum of its layer products, one optimizer step costs
//! `3 x forward x batch` (backward counted as twice the forward), a centroid
//! update costs `d`, minimum-distance scoring costs `d * k`, and a frozen
//! teacher adds one forward per trained sample.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, Dataset};
use crate::error::{Error, Result};
use crate::heads::{CentroidStore, FeatureMap, Head};
use crate::linalg;
use crate::ood::{max_softmax_score, mdt_score, OodScorerKind};
use crate::sequence::StreamTask;
use crate::training::{
    ewc_penalty, fisher_estimate, loss_and_grad_with_distillation, xent_loss_and_grad,
    DistillContext, EwcState, LabeledExample, Model, SgdState, UpdateStrategy,
};

/// One step of the evaluation log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub true_class: ClassId,
    /// Argmax over the known classes; None when nothing is known yet.
    pub predicted_class: Option<ClassId>,
    /// True iff the true class was outside the known set at prediction time.
    pub unseen: bool,
    /// Larger = more likely out-of-distribution.
    pub ood_score: f64,
    /// Known-class count the prediction was made against.
    pub known_count: usize,
}

pub type EvalLog = Vec<EvalRecord>;

/// Monotone counter of multiply-accumulate operations.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct MacMeter {
    total: u64,
}

impl MacMeter {
    pub fn new() -> Self {
        MacMeter::default()
    }

    pub fn add(&mut self, macs: u64) {
        self.total += macs;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn gmacs(&self) -> f64 {
        self.total as f64 / 1e9
    }
}

/// Classes the learner may currently predict; grows as labels reveal new
/// classes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnownSet(BTreeSet<ClassId>);

impl KnownSet {
    pub fn from_classes(classes: impl IntoIterator<Item = ClassId>) -> Self {
        KnownSet(classes.into_iter().collect())
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.0.contains(&class)
    }

    pub fn insert(&mut self, class: ClassId) -> bool {
        self.0.insert(class)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Continual-learning regularizer attached to offline training.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularizer {
    None,
    /// Distillation from a frozen copy of the pretrained model, restricted
    /// to classes the teacher knows that have appeared in the stream.
    Lwf {
        teacher_map: FeatureMap,
        teacher_head: Head,
        temperature: f64,
        weight: f64,
    },
    /// Quadratic anchoring to the pretrained parameters weighted by the
    /// Fisher diagonal, re-estimated on held-out pretrain data at the start
    /// of every offline phase.
    Ewc {
        state: EwcState,
        fisher_features: Vec<Vec<f64>>,
        fisher_labels: Vec<ClassId>,
    },
}

/// A pluggable learner: feature map, head, optimizer, and optional
/// regularizer / imprinting store. Single-writer mutable state; one stream
/// run owns one learner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Learner {
    pub map: FeatureMap,
    pub head: Head,
    pub train_map: bool,
    pub sgd: SgdState,
    pub batch_size: usize,
    pub regularizer: Regularizer,
    /// Centroids backing weight imprinting for cosine heads.
    pub imprint_store: Option<CentroidStore>,
    /// Non-fatal conditions surfaced during training (e.g. an empty
    /// distillation class intersection).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Learner {
    pub fn input_dim(&self) -> usize {
        self.map.input_dim()
    }

    pub fn known_classes(&self) -> &[ClassId] {
        self.head.classes()
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.map.forward(x)
    }

    /// Probabilities over the known classes and the argmax class.
    pub fn predict_from_features(&self, feats: &[f64]) -> Result<(Vec<f64>, Option<ClassId>)> {
        if self.head.classes().is_empty() {
            return Ok((Vec::new(), None));
        }
        let logits = self.head.logits(feats)?;
        let probs = linalg::softmax(&logits);
        let class = linalg::argmax(&logits).map(|i| self.head.classes()[i]);
        Ok((probs, class))
    }

    pub fn admit_class(&mut self, class: ClassId) -> Result<()> {
        self.head.admit_class(class)
    }

    /// Incorporates one labeled sample into instance state (centroids and
    /// imprinted rows). Returns the MACs spent; heads without instance state
    /// spend none.
    pub fn instance_update(&mut self, feats: &[f64], label: ClassId) -> Result<u64> {
        match &mut self.head {
            Head::Centroid { store, .. } => {
                store.update(label, feats)?;
                Ok(store.dim() as u64)
            }
            Head::Exemplar(head) => {
                head.update_centroid(label, feats)?;
                Ok(head.dim() as u64)
            }
            Head::Cosine(head) => {
                let store = self
                    .imprint_store
                    .as_mut()
                    .ok_or_else(|| Error::InvalidSpec("cosine learner without store".into()))?;
                store.update(label, feats)?;
                let centroid = store.centroid(label).ok_or(Error::EmptyClassSlot(label.0))?;
                head.imprint_row(label, &centroid)?;
                Ok(store.dim() as u64)
            }
            Head::Linear(_) => Ok(0),
        }
    }

    /// First-sample initialization for a newly admitted class when the
    /// strategy is not doing per-sample instance updates. Keeps store-backed
    /// heads scoreable for classes admitted mid-stream.
    pub fn seed_new_class(&mut self, feats: &[f64], label: ClassId) -> Result<u64> {
        match &self.head {
            Head::Linear(_) => Ok(0),
            _ => self.instance_update(feats, label),
        }
    }

    /// Whether instance updates cost anything (the head keeps centroids).
    pub fn has_instance_state(&self) -> bool {
        !matches!(self.head, Head::Linear(_))
    }

    pub fn trainable_len(&self) -> usize {
        let map = if self.train_map {
            self.map.trainable_len()
        } else {
            0
        };
        map + self.head.trainable_len()
    }

    /// Forward cost of scoring one sample against k known classes.
    pub fn forward_macs(&self, k: usize) -> u64 {
        self.map.forward_macs() + self.head.scoring_macs(k)
    }

    /// Full per-step inference cost: forward plus the OOD scorer.
    pub fn inference_macs(&self, k: usize, ood: OodScorerKind) -> u64 {
        self.forward_macs(k) + ood_scoring_macs(ood, self.map.output_dim(), k)
    }

    fn teacher_forward_macs(&self) -> u64 {
        match &self.regularizer {
            Regularizer::Lwf {
                teacher_map,
                teacher_head,
                ..
            } => teacher_map.forward_macs() + teacher_head.scoring_macs(teacher_head.classes().len()),
            _ => 0,
        }
    }

    /// One offline phase: `epochs` shuffled passes over the buffer at the
    /// configured batch size, with the regularizer applied. Returns the MACs
    /// spent. A learner without trainable parameters, or an empty buffer, is
    /// a no-op.
    pub fn offline_phase(
        &mut self,
        buffer: &[LabeledExample],
        epochs: usize,
        stream_seen: &BTreeSet<ClassId>,
        rng: &mut ChaCha8Rng,
    ) -> Result<u64> {
        if buffer.is_empty() || self.trainable_len() == 0 {
            return Ok(0);
        }
        let k = self.head.classes().len();
        let forward = self.forward_macs(k);
        let teacher_forward = self.teacher_forward_macs();
        let mut macs = 0u64;

        // Shared class set for distillation, fixed for the phase.
        let lwf_shared: Option<Vec<ClassId>> = match &self.regularizer {
            Regularizer::Lwf { teacher_head, .. } => {
                let shared: Vec<ClassId> = teacher_head
                    .classes()
                    .iter()
                    .copied()
                    .filter(|c| stream_seen.contains(c))
                    .collect();
                if shared.is_empty() {
                    self.warnings.push(
                        "distillation skipped: no stream-seen class is known to the teacher"
                            .into(),
                    );
                    None
                } else {
                    Some(shared)
                }
            }
            _ => None,
        };

        // Fisher re-estimated at the start of every phase, at current
        // parameters, on the held-out pretrain samples.
        if let Regularizer::Ewc {
            state,
            fisher_features,
            fisher_labels,
        } = &mut self.regularizer
        {
            let data: Vec<LabeledExample> = fisher_features
                .iter()
                .map(|f| f.as_slice())
                .zip(fisher_labels.iter().copied())
                .collect();
            let mut model = Model::new(&mut self.map, &mut self.head, self.train_map);
            let fisher = fisher_estimate(&mut model, &data)?;
            state.set_fisher(fisher)?;
            macs += 3 * forward * data.len() as u64;
        }

        let mut indices: Vec<usize> = (0..buffer.len()).collect();
        for _ in 0..epochs {
            indices.shuffle(rng);
            for chunk in indices.chunks(self.batch_size.max(1)) {
                let batch: Vec<LabeledExample> = chunk.iter().map(|&i| buffer[i]).collect();
                let mut model = Model::new(&mut self.map, &mut self.head, self.train_map);
                let (_, mut grad) = match (&self.regularizer, &lwf_shared) {
                    (
                        Regularizer::Lwf {
                            teacher_map,
                            teacher_head,
                            temperature,
                            weight,
                        },
                        Some(shared),
                    ) => {
                        let ctx = DistillContext {
                            teacher_map,
                            teacher_head,
                            temperature: *temperature,
                            shared_classes: shared,
                            weight: *weight,
                        };
                        loss_and_grad_with_distillation(&mut model, &batch, &ctx)?
                    }
                    _ => xent_loss_and_grad(&mut model, &batch)?,
                };
                if let Regularizer::Ewc { state, .. } = &self.regularizer {
                    let params = Model::new(&mut self.map, &mut self.head, self.train_map).params();
                    let anchored = state.anchor.len().min(params.len());
                    let (_, reg_grad) = ewc_penalty(&params[..anchored], state)?;
                    for (g, r) in grad.iter_mut().zip(reg_grad) {
                        *g += r;
                    }
                }
                let mut model = Model::new(&mut self.map, &mut self.head, self.train_map);
                let mut params = model.params();
                self.sgd.step(&mut params, &grad)?;
                model.set_params(&params)?;
                if let Head::Cosine(h) = &mut self.head {
                    // Temperature must stay positive.
                    h.temperature = h.temperature.max(1e-3);
                }
                macs += 3 * forward * chunk.len() as u64
                    + if lwf_shared.is_some() {
                        teacher_forward * chunk.len() as u64
                    } else {
                        0
                    };
            }
        }
        Ok(macs)
    }
}

/// Cost to compute the OOD score once the forward pass is done: max-softmax
/// reuses the probabilities, minimum-distance compares against k
/// representations.
pub fn ood_scoring_macs(ood: OodScorerKind, d: usize, k: usize) -> u64 {
    match ood {
        OodScorerKind::MaxSoftmax => 0,
        OodScorerKind::Mdt { .. } => (d * k) as u64,
    }
}

/// MACs of one optimizer step: forward plus a backward counted as twice the
/// forward, per sample in the batch.
pub fn meter_training_step(forward_macs: u64, batch_len: usize) -> u64 {
    3 * forward_macs * batch_len as u64
}

/// Per-sample centroid update cost.
pub fn meter_instance_update(d: usize) -> u64 {
    d as u64
}

/// Everything needed to re-derive a run's MAC total from its log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CostSpec {
    pub map_forward_macs: u64,
    pub feature_dim: usize,
    pub head_normalizes_input: bool,
    pub head_has_store: bool,
    pub trainable: bool,
    pub ood: OodScorerKind,
    pub teacher_forward_macs: u64,
    pub fisher_samples: usize,
}

impl CostSpec {
    pub fn of(learner: &Learner, ood: OodScorerKind) -> Self {
        let fisher_samples = match &learner.regularizer {
            Regularizer::Ewc { fisher_labels, .. } => fisher_labels.len(),
            _ => 0,
        };
        let d = learner.map.output_dim();
        // Whether offline phases cost anything is a property of the learner
        // kind, not of the momentary class count (heads start empty).
        let gradient_trained = !matches!(learner.head, Head::Centroid { .. })
            || (learner.train_map && learner.map.trainable_len() > 0);
        CostSpec {
            map_forward_macs: learner.map.forward_macs(),
            feature_dim: d,
            head_normalizes_input: learner.head.scoring_macs(1) > d as u64,
            head_has_store: learner.has_instance_state(),
            trainable: gradient_trained,
            ood,
            teacher_forward_macs: learner.teacher_forward_macs(),
            fisher_samples,
        }
    }

    fn head_scoring_macs(&self, k: usize) -> u64 {
        (self.feature_dim * k) as u64
            + if self.head_normalizes_input {
                self.feature_dim as u64
            } else {
                0
            }
    }

    /// A-side cost of one step at k known classes.
    pub fn meter_inference(&self, k: usize) -> u64 {
        self.map_forward_macs
            + self.head_scoring_macs(k)
            + ood_scoring_macs(self.ood, self.feature_dim, k)
    }

    fn forward_macs(&self, k: usize) -> u64 {
        self.map_forward_macs + self.head_scoring_macs(k)
    }
}

/// Re-derives the MAC total from the log and the run configuration alone.
/// Must equal the streamed meter exactly.
pub fn recompute_total_macs(log: &[EvalRecord], spec: &CostSpec, strategy: UpdateStrategy) -> u64 {
    let mut total = 0u64;
    for (i, rec) in log.iter().enumerate() {
        let position = i + 1;
        total += spec.meter_inference(rec.known_count);
        let instance = strategy.instance_update_at(position);
        if spec.head_has_store && (instance || rec.unseen) {
            total += meter_instance_update(spec.feature_dim);
        }
        if let Some(epochs) = strategy.offline_epochs_at(position) {
            if spec.trainable {
                let k_after = rec.known_count + usize::from(rec.unseen);
                let forward = spec.forward_macs(k_after);
                total += 3 * forward * (position as u64) * epochs as u64;
                total += spec.teacher_forward_macs * position as u64 * epochs as u64;
                total += 3 * forward * spec.fisher_samples as u64;
            }
        }
    }
    total
}

/// Result of one streamed run.
#[derive(Debug, Clone)]
pub struct StreamOutcome {
    pub log: EvalLog,
    pub meter: MacMeter,
    pub warnings: Vec<String>,
}

/// Runs the streaming loop over `task`, mutating `learner` in place.
///
/// Per step: predict (A MACs), set the unseen flag, log, buffer the sample,
/// admit the class if new, then apply the update strategy (B MACs). The
/// prediction at step t depends only on pretraining and labels revealed
/// strictly before t.
pub fn run_stream(
    task: &StreamTask,
    dataset: &Dataset,
    learner: &mut Learner,
    strategy: UpdateStrategy,
    ood: OodScorerKind,
    seed: u64,
) -> Result<StreamOutcome> {
    strategy.validate()?;
    if learner.input_dim() != dataset.dim() {
        return Err(Error::DimMismatch {
            expected: dataset.dim(),
            got: learner.input_dim(),
        });
    }

    let mut known = KnownSet::from_classes(learner.known_classes().iter().copied());
    let mut buffer: Vec<usize> = Vec::with_capacity(task.len());
    let mut stream_seen: BTreeSet<ClassId> = BTreeSet::new();
    let mut log = Vec::with_capacity(task.len());
    let mut meter = MacMeter::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);

    for (step, &idx) in task.order.iter().enumerate() {
        let sample = dataset
            .sample(idx)
            .ok_or_else(|| Error::InvalidSpec(format!("sample index {idx} out of range")))?;
        let label = sample.label;
        let feats = learner.features(&sample.features)?;
        let k_now = learner.known_classes().len();

        let (probs, predicted) = learner.predict_from_features(&feats)?;
        let ood_score = match ood {
            OodScorerKind::MaxSoftmax => {
                if probs.is_empty() {
                    1.0
                } else {
                    max_softmax_score(&probs)?
                }
            }
            OodScorerKind::Mdt { metric } => {
                let reps = learner.head.class_representations();
                if reps.is_empty() {
                    f64::MAX
                } else {
                    mdt_score(&reps, &feats, metric)?
                }
            }
        };
        meter.add(learner.inference_macs(k_now, ood));

        let unseen = !known.contains(label);
        log.push(EvalRecord {
            step,
            true_class: label,
            predicted_class: predicted,
            unseen,
            ood_score,
            known_count: k_now,
        });

        buffer.push(idx);
        stream_seen.insert(label);
        if unseen {
            known.insert(label);
            learner.admit_class(label)?;
        }

        let position = step + 1;
        if strategy.instance_update_at(position) {
            meter.add(learner.instance_update(&feats, label)?);
        } else if unseen {
            meter.add(learner.seed_new_class(&feats, label)?);
        }
        if let Some(epochs) = strategy.offline_epochs_at(position) {
            let resolved: Vec<LabeledExample> = buffer
                .iter()
                .map(|&i| {
                    let s = &dataset.samples()[i];
                    (s.features.as_slice(), s.label)
                })
                .collect();
            meter.add(learner.offline_phase(&resolved, epochs, &stream_seen, &mut rng)?);
        }
    }

    let warnings = std::mem::take(&mut learner.warnings);
    Ok(StreamOutcome {
        log,
        meter,
        warnings,
    })
}

/// Writes the log as newline-delimited JSON, one record per step.
pub fn write_ndjson<W: Write>(log: &[EvalRecord], mut w: W) -> Result<()> {
    for rec in log {
        let line = serde_json::to_string(rec)?;
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io("<ndjson>", e))?;
    }
    Ok(())
}

pub fn read_ndjson<R: BufRead>(r: R) -> Result<EvalLog> {
    let mut log = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| Error::io("<ndjson>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        log.push(serde_json::from_str(&line)?);
    }
    Ok(log)
}
