//! Losses, gradients, the SGD+momentum optimizer, continual-learning
//! regularizers, episodic prototype pretraining, and update-strategy
//! schedules.
//!
//! Gradient-trainable parameters of a feature map + head pair flatten into a
//! single vector (map first, then head; see [`Model`]), and every analytic
//! gradient here is checked against central finite differences in the test
//! suites.

use serde::{Deserialize, Serialize};

use crate::dataset::ClassId;
use crate::error::{Error, Result};
use crate::heads::{FeatureMap, Head};
use crate::linalg;

/// One labeled feature vector, borrowed from wherever the caller keeps data.
pub type LabeledExample<'a> = (&'a [f64], ClassId);

// ---------------------------------------------------------------------------
// Optimizer

/// SGD with momentum: `v <- momentum * v + g; p <- p - lr * v`.
///
/// The velocity buffer grows with the parameter vector (new classes append at
/// the end of the flat layout), starting new entries at zero.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
    /// Total optimizer steps taken.
    pub steps: u64,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidSpec("momentum must lie in [0, 1)".into()));
        }
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidSpec(
                "learning rate must be finite and >= 0".into(),
            ));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            velocity: Vec::new(),
            steps: 0,
        })
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch {
                expected: params.len(),
                got: grads.len(),
            });
        }
        if self.velocity.len() > params.len() {
            return Err(Error::ShapeMismatch {
                expected: self.velocity.len(),
                got: params.len(),
            });
        }
        self.velocity.resize(params.len(), 0.0);
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            *v = self.momentum * *v + g;
            *p -= self.learning_rate * *v;
        }
        self.steps += 1;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Update strategies

/// When a learner trains during the stream. Positions are 1-based sample
/// counts; all schedules are pure functions of the position.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpdateStrategy {
    /// Batch-train for `epochs` passes over everything seen, every
    /// `interval_samples` stream samples.
    OfflineEvery {
        interval_samples: usize,
        epochs: usize,
    },
    /// Instance updates (centroids / imprinting) after every sample.
    InstancePerSample,
    /// Instance updates every sample plus periodic offline phases.
    Hybrid {
        interval_samples: usize,
        epochs: usize,
    },
    /// Imprint until `switch_at` samples have streamed, then fine-tune on the
    /// offline schedule.
    ImprintThenFinetune {
        switch_at: usize,
        interval_samples: usize,
        epochs: usize,
    },
}

pub const DEFAULT_INTERVAL_SAMPLES: usize = 5_000;
pub const DEFAULT_OFFLINE_EPOCHS: usize = 4;
pub const DEFAULT_IMPRINT_SWITCH: usize = 10_000;
/// Stream length the imprint switch point was tuned for; shorter streams
/// scale it proportionally.
pub const REFERENCE_STREAM_LEN: usize = 90_000;

/// `switch_at` scaled to the stream length: 10,000 at the 90,000-sample
/// reference, proportionally less for shorter streams.
pub fn scaled_imprint_switch(total_samples: usize) -> usize {
    if total_samples >= REFERENCE_STREAM_LEN {
        DEFAULT_IMPRINT_SWITCH
    } else {
        ((total_samples as f64) * (DEFAULT_IMPRINT_SWITCH as f64 / REFERENCE_STREAM_LEN as f64))
            .round() as usize
    }
}

impl UpdateStrategy {
    pub fn validate(&self) -> Result<()> {
        let (interval, epochs) = match *self {
            UpdateStrategy::OfflineEvery {
                interval_samples,
                epochs,
            }
            | UpdateStrategy::Hybrid {
                interval_samples,
                epochs,
            }
            | UpdateStrategy::ImprintThenFinetune {
                interval_samples,
                epochs,
                ..
            } => (interval_samples, epochs),
            UpdateStrategy::InstancePerSample => return Ok(()),
        };
        if interval < 1 {
            return Err(Error::InvalidSpec("interval_samples must be >= 1".into()));
        }
        if epochs < 1 {
            return Err(Error::InvalidSpec("epochs must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether the sample at 1-based `position` triggers an instance update.
    pub fn instance_update_at(&self, position: usize) -> bool {
        match *self {
            UpdateStrategy::InstancePerSample | UpdateStrategy::Hybrid { .. } => true,
            UpdateStrategy::ImprintThenFinetune { switch_at, .. } => position <= switch_at,
            UpdateStrategy::OfflineEvery { .. } => false,
        }
    }

    /// Number of offline epochs due after the sample at 1-based `position`,
    /// or None when no offline phase triggers.
    pub fn offline_epochs_at(&self, position: usize) -> Option<usize> {
        match *self {
            UpdateStrategy::OfflineEvery {
                interval_samples,
                epochs,
            }
            | UpdateStrategy::Hybrid {
                interval_samples,
                epochs,
            } => position.is_multiple_of(interval_samples).then_some(epochs),
            UpdateStrategy::ImprintThenFinetune {
                switch_at,
                interval_samples,
                epochs,
            } => (position >= switch_at && position.is_multiple_of(interval_samples))
                .then_some(epochs),
            UpdateStrategy::InstancePerSample => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Model view and cross-entropy

/// A feature map + head pair viewed as one trainable model. The flat
/// parameter layout is `[map params if train_map, head params]`; the head
/// section appends new classes at the end, so the layout prefix is stable
/// across class admissions.
pub struct Model<'a> {
    pub map: &'a mut FeatureMap,
    pub head: &'a mut Head,
    pub train_map: bool,
}

impl<'a> Model<'a> {
    pub fn new(map: &'a mut FeatureMap, head: &'a mut Head, train_map: bool) -> Model<'a> {
        Model {
            map,
            head,
            train_map,
        }
    }

    fn map_param_len(&self) -> usize {
        if self.train_map {
            self.map.trainable_len()
        } else {
            0
        }
    }

    pub fn param_len(&self) -> usize {
        self.map_param_len() + self.head.trainable_len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        if self.train_map {
            self.map.append_params(&mut out);
        }
        self.head.append_params(&mut out);
        out
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.param_len() {
            return Err(Error::ShapeMismatch {
                expected: self.param_len(),
                got: src.len(),
            });
        }
        let cut = self.map_param_len();
        if self.train_map {
            self.map.load_params(&src[..cut])?;
        }
        self.head.load_params(&src[cut..])
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let feats = self.map.forward(x)?;
        self.head.logits(&feats)
    }

    /// Forward cost in MACs of one sample at k known classes.
    pub fn forward_macs(&self, k: usize) -> u64 {
        self.map.forward_macs() + self.head.scoring_macs(k)
    }
}

/// Mean softmax cross-entropy over the batch and its gradient in the model's
/// flat parameter layout. Labels must already be known to the head.
pub fn xent_loss_and_grad(model: &mut Model, batch: &[LabeledExample]) -> Result<(f64, Vec<f64>)> {
    accumulate_loss_and_grad(model, batch, None)
}

/// Cross-entropy loss alone (used by finite-difference checks).
pub fn xent_loss(model: &Model, batch: &[LabeledExample]) -> Result<f64> {
    let mut total = 0.0;
    for &(x, y) in batch {
        let logits = model.logits(x)?;
        let yi = model.head.index_of(y).ok_or(Error::UnknownClass(y.0))?;
        if !logits[yi].is_finite() {
            return Err(Error::EmptyClassSlot(y.0));
        }
        total += linalg::log_sum_exp(&logits) - logits[yi];
    }
    Ok(total / batch.len().max(1) as f64)
}

/// Distillation settings resolved for one offline phase: the frozen teacher,
/// the smoothing temperature, and the class ids shared by the teacher and the
/// stream so far.
pub struct DistillContext<'a> {
    pub teacher_map: &'a FeatureMap,
    pub teacher_head: &'a Head,
    pub temperature: f64,
    pub shared_classes: &'a [ClassId],
    pub weight: f64,
}

/// Batch loss = hard cross-entropy plus (optionally) the distillation term
/// restricted to the shared classes; gradient in the model's flat layout.
pub fn loss_and_grad_with_distillation(
    model: &mut Model,
    batch: &[LabeledExample],
    distill: &DistillContext,
) -> Result<(f64, Vec<f64>)> {
    accumulate_loss_and_grad(model, batch, Some(distill))
}

fn accumulate_loss_and_grad(
    model: &mut Model,
    batch: &[LabeledExample],
    distill: Option<&DistillContext>,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty training batch"));
    }
    let map_len = model.map_param_len();
    let head_len = model.head.trainable_len();
    let mut grad = vec![0.0; map_len + head_len];
    let mut loss = 0.0;
    let n = batch.len() as f64;

    // Student/teacher slot indices for the shared distillation classes.
    let restricted: Option<(Vec<usize>, Vec<usize>)> = match distill {
        Some(ctx) if !ctx.shared_classes.is_empty() => {
            let mut student = Vec::with_capacity(ctx.shared_classes.len());
            let mut teacher = Vec::with_capacity(ctx.shared_classes.len());
            for &c in ctx.shared_classes {
                let si = model.head.index_of(c).ok_or(Error::UnknownClass(c.0))?;
                let ti = ctx
                    .teacher_head
                    .index_of(c)
                    .ok_or(Error::UnknownClass(c.0))?;
                student.push(si);
                teacher.push(ti);
            }
            Some((student, teacher))
        }
        _ => None,
    };

    for &(x, y) in batch {
        let (feats, trace) = match model.map {
            FeatureMap::Frozen { .. } => (model.map.forward(x)?, None),
            FeatureMap::Mlp(mlp) => {
                let trace = mlp.forward_trace(x);
                (trace.output().to_vec(), Some(trace))
            }
        };
        let logits = model.head.logits(&feats)?;
        let yi = model.head.index_of(y).ok_or(Error::UnknownClass(y.0))?;
        if !logits[yi].is_finite() {
            return Err(Error::EmptyClassSlot(y.0));
        }
        loss += (linalg::log_sum_exp(&logits) - logits[yi]) / n;

        let probs = linalg::softmax(&logits);
        let mut dlogits = probs;
        dlogits[yi] -= 1.0;
        for v in &mut dlogits {
            *v /= n;
        }

        if let (Some(ctx), Some((student_idx, teacher_idx))) = (distill, restricted.as_ref()) {
            let teacher_feats = ctx.teacher_map.forward(x)?;
            let teacher_logits = ctx.teacher_head.logits(&teacher_feats)?;
            let t_restricted: Vec<f64> =
                teacher_idx.iter().map(|&i| teacher_logits[i]).collect();
            let s_restricted: Vec<f64> = student_idx.iter().map(|&i| logits[i]).collect();
            loss += ctx.weight * distill_cross_entropy(&t_restricted, &s_restricted, ctx.temperature)?
                / n;
            let dres = distill_grad(&t_restricted, &s_restricted, ctx.temperature)?;
            for (&si, dv) in student_idx.iter().zip(dres) {
                dlogits[si] += ctx.weight * dv / n;
            }
        }

        let mut dfeats = if model.train_map && matches!(model.map, FeatureMap::Mlp(_)) {
            Some(vec![0.0; feats.len()])
        } else {
            None
        };
        model
            .head
            .backprop(&feats, &dlogits, &mut grad[map_len..], dfeats.as_deref_mut());
        if let (Some(df), Some(trace), FeatureMap::Mlp(mlp)) = (dfeats, trace, &*model.map) {
            mlp.backward(&trace, &df, &mut grad[..map_len]);
        }
    }
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Distillation (knowledge-transfer) loss

/// Cross-entropy between the teacher's and student's temperature-smoothed
/// softmax distributions over the same class slots.
pub fn distill_cross_entropy(
    teacher_logits: &[f64],
    student_logits: &[f64],
    temperature: f64,
) -> Result<f64> {
    if teacher_logits.is_empty() {
        return Err(Error::EmptyInput("empty class set for distillation"));
    }
    if teacher_logits.len() != student_logits.len() {
        return Err(Error::ShapeMismatch {
            expected: teacher_logits.len(),
            got: student_logits.len(),
        });
    }
    let t_scaled: Vec<f64> = teacher_logits.iter().map(|l| l / temperature).collect();
    let s_scaled: Vec<f64> = student_logits.iter().map(|l| l / temperature).collect();
    let q = linalg::softmax(&t_scaled);
    let lse = linalg::log_sum_exp(&s_scaled);
    Ok(q.iter()
        .zip(&s_scaled)
        .map(|(&qi, &si)| qi * (lse - si))
        .sum())
}

/// Gradient of [`distill_cross_entropy`] with respect to the student logits:
/// `(softmax(student/T) - softmax(teacher/T)) / T`.
pub fn distill_grad(
    teacher_logits: &[f64],
    student_logits: &[f64],
    temperature: f64,
) -> Result<Vec<f64>> {
    if teacher_logits.len() != student_logits.len() {
        return Err(Error::ShapeMismatch {
            expected: teacher_logits.len(),
            got: student_logits.len(),
        });
    }
    let t_scaled: Vec<f64> = teacher_logits.iter().map(|l| l / temperature).collect();
    let s_scaled: Vec<f64> = student_logits.iter().map(|l| l / temperature).collect();
    let q = linalg::softmax(&t_scaled);
    let p = linalg::softmax(&s_scaled);
    Ok(p.iter()
        .zip(&q)
        .map(|(&pi, &qi)| (pi - qi) / temperature)
        .collect())
}

/// Total retained-knowledge loss for one sample: hard cross-entropy on the
/// full student logits plus the distillation term on the shared class slots.
pub fn lwf_loss(
    student_logits: &[f64],
    teacher_logits: &[f64],
    temperature: f64,
    hard_label: usize,
    student_shared: &[usize],
    teacher_shared: &[usize],
) -> Result<f64> {
    if hard_label >= student_logits.len() {
        return Err(Error::ShapeMismatch {
            expected: student_logits.len(),
            got: hard_label,
        });
    }
    let hard = linalg::log_sum_exp(student_logits) - student_logits[hard_label];
    let s: Vec<f64> = student_shared.iter().map(|&i| student_logits[i]).collect();
    let t: Vec<f64> = teacher_shared.iter().map(|&i| teacher_logits[i]).collect();
    Ok(hard + distill_cross_entropy(&t, &s, temperature)?)
}

// ---------------------------------------------------------------------------
// Fisher-penalty (weight-anchoring) regularizer

/// Anchor parameters, Fisher diagonal, and penalty weight for quadratic
/// weight anchoring. Applies to the stable prefix of the flat parameter
/// layout that existed when the anchor was frozen.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EwcState {
    pub anchor: Vec<f64>,
    pub fisher: Vec<f64>,
    pub lambda: f64,
}

impl EwcState {
    pub fn new(anchor: Vec<f64>, lambda: f64) -> Self {
        let n = anchor.len();
        EwcState {
            anchor,
            fisher: vec![0.0; n],
            lambda,
        }
    }

    /// Replaces the Fisher diagonal; extra entries beyond the anchored block
    /// are truncated (they correspond to classes admitted after the anchor).
    pub fn set_fisher(&mut self, mut fisher: Vec<f64>) -> Result<()> {
        if fisher.len() < self.anchor.len() {
            return Err(Error::ShapeMismatch {
                expected: self.anchor.len(),
                got: fisher.len(),
            });
        }
        fisher.truncate(self.anchor.len());
        self.fisher = fisher;
        Ok(())
    }
}

/// Empirical Fisher diagonal: mean over samples of the squared gradient of
/// the true-label log-likelihood, in the model's flat parameter layout.
pub fn fisher_estimate(model: &mut Model, data: &[LabeledExample]) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("fisher estimation data"));
    }
    let mut fisher = vec![0.0; model.param_len()];
    for &example in data {
        // grad of -log p equals grad of log p up to sign; squared they agree.
        let (_, g) = xent_loss_and_grad(model, &[example])?;
        for (f, gi) in fisher.iter_mut().zip(&g) {
            *f += gi * gi;
        }
    }
    let n = data.len() as f64;
    for f in &mut fisher {
        *f /= n;
    }
    Ok(fisher)
}

/// Quadratic anchoring penalty `(lambda/2) * sum_p F_p (theta_p - theta*_p)^2`
/// and its gradient `lambda * F . (theta - theta*)`. `params` must cover
/// exactly the anchored block.
pub fn ewc_penalty(params: &[f64], state: &EwcState) -> Result<(f64, Vec<f64>)> {
    if params.len() != state.anchor.len() {
        return Err(Error::ShapeMismatch {
            expected: state.anchor.len(),
            got: params.len(),
        });
    }
    let mut penalty = 0.0;
    let mut grad = Vec::with_capacity(params.len());
    for ((&p, &a), &f) in params.iter().zip(&state.anchor).zip(&state.fisher) {
        let delta = p - a;
        penalty += 0.5 * state.lambda * f * delta * delta;
        grad.push(state.lambda * f * delta);
    }
    Ok((penalty, grad))
}

// ---------------------------------------------------------------------------
// Episodic prototype pretraining

/// Episode loss for prototype-based pretraining of a feature map.
///
/// Prototypes are the per-class means of the support embeddings; each query
/// is scored by the softmax of negative Euclidean distances to the
/// prototypes. Returns the mean query cross-entropy and its gradient with
/// respect to the map parameters (empty for a frozen map); gradients flow
/// through both the prototypes and the query embeddings.
pub fn proto_episode_loss(
    map: &mut FeatureMap,
    support: &[LabeledExample],
    query: &[LabeledExample],
) -> Result<(f64, Vec<f64>)> {
    if support.is_empty() {
        return Err(Error::EmptyInput("episode support set"));
    }
    if query.is_empty() {
        return Err(Error::EmptyInput("episode query set"));
    }

    let mut classes: Vec<ClassId> = support.iter().map(|&(_, y)| y).collect();
    classes.sort_unstable();
    classes.dedup();
    for &(_, y) in query {
        if !classes.contains(&y) {
            return Err(Error::EmptyClassSlot(y.0));
        }
    }

    let is_mlp = matches!(map, FeatureMap::Mlp(_));
    let param_len = map.trainable_len();

    // Embed support and queries, keeping traces for the backward pass.
    let mut supp_embeds = Vec::with_capacity(support.len());
    let mut supp_traces = Vec::with_capacity(support.len());
    for &(x, _) in support {
        match &*map {
            FeatureMap::Frozen { .. } => {
                supp_embeds.push(map.forward(x)?);
                supp_traces.push(None);
            }
            FeatureMap::Mlp(mlp) => {
                let t = mlp.forward_trace(x);
                supp_embeds.push(t.output().to_vec());
                supp_traces.push(Some(t));
            }
        }
    }
    let out_dim = map.output_dim();

    let mut proto = vec![vec![0.0; out_dim]; classes.len()];
    let mut proto_n = vec![0usize; classes.len()];
    for (&(_, y), emb) in support.iter().zip(&supp_embeds) {
        let c = classes.iter().position(|&k| k == y).unwrap();
        for (p, v) in proto[c].iter_mut().zip(emb) {
            *p += v;
        }
        proto_n[c] += 1;
    }
    for (p, &n) in proto.iter_mut().zip(&proto_n) {
        for v in p.iter_mut() {
            *v /= n as f64;
        }
    }

    let mut loss = 0.0;
    let mut grad = vec![0.0; param_len];
    let mut dproto = vec![vec![0.0; out_dim]; classes.len()];
    let nq = query.len() as f64;

    for &(x, y) in query {
        let (emb, trace) = match &*map {
            FeatureMap::Frozen { .. } => (map.forward(x)?, None),
            FeatureMap::Mlp(mlp) => {
                let t = mlp.forward_trace(x);
                (t.output().to_vec(), Some(t))
            }
        };
        let yi = classes.iter().position(|&k| k == y).unwrap();
        let logits: Vec<f64> = proto
            .iter()
            .map(|p| -linalg::euclidean(p, &emb))
            .collect();
        loss += (linalg::log_sum_exp(&logits) - logits[yi]) / nq;

        if is_mlp {
            let probs = linalg::softmax(&logits);
            let mut demb = vec![0.0; out_dim];
            for (c, p) in proto.iter().enumerate() {
                let dl = (probs[c] - if c == yi { 1.0 } else { 0.0 }) / nq;
                if dl == 0.0 {
                    continue;
                }
                let dist = linalg::euclidean(p, &emb);
                if dist < 1e-12 {
                    continue;
                }
                // d(-dist)/d emb = (proto - emb)/dist, and the opposite sign
                // for the prototype.
                for j in 0..out_dim {
                    let diff = (p[j] - emb[j]) / dist;
                    demb[j] += dl * diff;
                    dproto[c][j] -= dl * diff;
                }
            }
            if let (Some(t), FeatureMap::Mlp(mlp)) = (trace, &*map) {
                mlp.backward(&t, &demb, &mut grad);
            }
        }
    }

    if is_mlp {
        // Prototype gradients distribute evenly over their support points.
        if let FeatureMap::Mlp(mlp) = &*map {
            for ((&(_, y), trace), _) in support.iter().zip(&supp_traces).zip(&supp_embeds) {
                let c = classes.iter().position(|&k| k == y).unwrap();
                let share: Vec<f64> = dproto[c].iter().map(|v| v / proto_n[c] as f64).collect();
                if let Some(t) = trace {
                    mlp.backward(t, &share, &mut grad);
                }
            }
        }
    }

    Ok((loss, grad))
}
