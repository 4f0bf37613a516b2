//! Classifier heads and feature maps.
//!
//! Four head families over a shared feature space:
//! - [`LinearHead`]: per-class weight row plus bias.
//! - [`CosineHead`]: temperature-scaled cosine between normalized weight rows
//!   and the normalized input; rows are typically imprinted from centroids.
//! - [`CentroidStore`] scored via [`ncm_predict`]: softmax of negative
//!   distances to per-class running means.
//! - [`ExemplarTuningHead`]: class representation = normalized-feature
//!   centroid plus a learnable residual vector, scored by a configurable
//!   similarity.
//!
//! Heads grow as new classes are admitted mid-stream. Gradient-trainable
//! parameters flatten into a stable order (new classes append at the end) so
//! optimizer state survives admissions. Centroid slots with zero samples
//! score `-inf` and are excluded from the softmax until their first sample
//! arrives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::ClassId;
use crate::error::{Error, Result};
use crate::linalg;

/// Similarity used by the exemplar-tuning head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Dot,
    Cosine,
    Euclidean,
}

/// Scoring metric for centroid (nearest-class-mean) heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NcmMetric {
    #[default]
    Euclidean,
    Cosine,
    Dot,
}

// ---------------------------------------------------------------------------
// Feature maps

/// Frozen identity over input embeddings, or a small trainable MLP.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureMap {
    Frozen { dim: usize },
    Mlp(Mlp),
}

impl FeatureMap {
    pub fn input_dim(&self) -> usize {
        match self {
            FeatureMap::Frozen { dim } => *dim,
            FeatureMap::Mlp(mlp) => mlp.dims[0],
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FeatureMap::Frozen { dim } => *dim,
            FeatureMap::Mlp(mlp) => *mlp.dims.last().unwrap(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        match self {
            FeatureMap::Frozen { .. } => Ok(x.to_vec()),
            FeatureMap::Mlp(mlp) => Ok(mlp.forward_trace(x).into_output()),
        }
    }

    /// MACs of one forward pass; the frozen map costs nothing.
    pub fn forward_macs(&self) -> u64 {
        match self {
            FeatureMap::Frozen { .. } => 0,
            FeatureMap::Mlp(mlp) => mlp.forward_macs(),
        }
    }

    pub fn trainable_len(&self) -> usize {
        match self {
            FeatureMap::Frozen { .. } => 0,
            FeatureMap::Mlp(mlp) => mlp.param_len(),
        }
    }

    pub fn append_params(&self, out: &mut Vec<f64>) {
        if let FeatureMap::Mlp(mlp) = self {
            mlp.append_params(out);
        }
    }

    pub fn load_params(&mut self, src: &[f64]) -> Result<()> {
        match self {
            FeatureMap::Frozen { .. } if src.is_empty() => Ok(()),
            FeatureMap::Frozen { .. } => Err(Error::ShapeMismatch {
                expected: 0,
                got: src.len(),
            }),
            FeatureMap::Mlp(mlp) => mlp.load_params(src),
        }
    }
}

/// Affine layers with elementwise `max(0, .)` after every layer.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Mlp {
    /// Layer widths including the input: `[in, h1, ..., out]`.
    pub dims: Vec<usize>,
    /// Row-major `out x in` weights per layer.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Activations of one MLP forward pass, kept for backpropagation.
pub struct MlpTrace {
    /// `acts[0]` is the input; `acts[l]` the post-ReLU output of layer l.
    acts: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    pub fn into_output(mut self) -> Vec<f64> {
        self.acts.pop().unwrap()
    }
}

impl Mlp {
    /// He-initialized MLP; `dims` must list at least input and output widths.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidSpec(
                "mlp needs >= 2 nonzero layer widths".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            weights.push(
                (0..fan_in * fan_out)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Mlp {
            dims: dims.to_vec(),
            weights,
            biases,
        })
    }

    pub fn forward_trace(&self, x: &[f64]) -> MlpTrace {
        let mut acts = Vec::with_capacity(self.dims.len());
        acts.push(x.to_vec());
        for l in 0..self.weights.len() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let prev = acts.last().unwrap();
            let mut out = vec![0.0; n_out];
            for (o, out_v) in out.iter_mut().enumerate() {
                let row = &self.weights[l][o * n_in..(o + 1) * n_in];
                *out_v = (linalg::dot(row, prev) + self.biases[l][o]).max(0.0);
            }
            acts.push(out);
        }
        MlpTrace { acts }
    }

    /// Backpropagates `d_out` (gradient at the MLP output) through the trace,
    /// accumulating parameter gradients into `grad` (this MLP's flat layout).
    pub fn backward(&self, trace: &MlpTrace, d_out: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.param_len());
        let mut d_act = d_out.to_vec();
        let mut layer_offsets = Vec::with_capacity(self.weights.len());
        let mut off = 0;
        for l in 0..self.weights.len() {
            layer_offsets.push(off);
            off += self.dims[l] * self.dims[l + 1] + self.dims[l + 1];
        }
        for l in (0..self.weights.len()).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let a_prev = &trace.acts[l];
            let a_out = &trace.acts[l + 1];
            let base = layer_offsets[l];
            let mut d_prev = vec![0.0; n_in];
            for o in 0..n_out {
                // ReLU subgradient: active iff the unit fired.
                let dz = if a_out[o] > 0.0 { d_act[o] } else { 0.0 };
                if dz == 0.0 {
                    continue;
                }
                let row = &self.weights[l][o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    grad[base + o * n_in + i] += dz * a_prev[i];
                    d_prev[i] += dz * row[i];
                }
                grad[base + n_out * n_in + o] += dz;
            }
            d_act = d_prev;
        }
    }

    pub fn forward_macs(&self) -> u64 {
        self.dims
            .windows(2)
            .map(|w| (w[0] * w[1]) as u64)
            .sum()
    }

    pub fn param_len(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn append_params(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
    }

    pub fn load_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.param_len() {
            return Err(Error::ShapeMismatch {
                expected: self.param_len(),
                got: src.len(),
            });
        }
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let wlen = w.len();
            let blen = b.len();
            w.copy_from_slice(&src[off..off + wlen]);
            off += wlen;
            b.copy_from_slice(&src[off..off + blen]);
            off += blen;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Centroid store

/// Per-class running sums for incremental class means.
///
/// With `normalize_inputs` each update adds `x / ||x||` instead of `x`, so the
/// centroid is the mean of normalized features.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CentroidStore {
    dim: usize,
    pub normalize_inputs: bool,
    classes: Vec<ClassId>,
    sums: Vec<Vec<f64>>,
    counts: Vec<u64>,
}

impl CentroidStore {
    pub fn new(dim: usize, normalize_inputs: bool) -> Self {
        CentroidStore {
            dim,
            normalize_inputs,
            classes: Vec::new(),
            sums: Vec::new(),
            counts: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn index_of(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn count(&self, class: ClassId) -> u64 {
        self.index_of(class).map_or(0, |i| self.counts[i])
    }

    pub fn admit(&mut self, class: ClassId) -> Result<usize> {
        if self.index_of(class).is_some() {
            return Err(Error::DuplicateClass(class.0));
        }
        self.classes.push(class);
        self.sums.push(vec![0.0; self.dim]);
        self.counts.push(0);
        Ok(self.classes.len() - 1)
    }

    /// Adds a sample to its class mean; unknown classes are admitted with
    /// count 1.
    pub fn update(&mut self, class: ClassId, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let add: Vec<f64> = if self.normalize_inputs {
            let n = linalg::norm(x);
            if n == 0.0 {
                return Err(Error::ZeroNorm);
            }
            x.iter().map(|v| v / n).collect()
        } else {
            x.to_vec()
        };
        let slot = match self.index_of(class) {
            Some(i) => i,
            None => self.admit(class)?,
        };
        for (s, v) in self.sums[slot].iter_mut().zip(&add) {
            *s += v;
        }
        self.counts[slot] += 1;
        Ok(())
    }

    /// Mean vector for the slot, or None while the slot has no samples.
    pub fn centroid_at(&self, slot: usize) -> Option<Vec<f64>> {
        if self.counts[slot] == 0 {
            return None;
        }
        let n = self.counts[slot] as f64;
        Some(self.sums[slot].iter().map(|s| s / n).collect())
    }

    pub fn centroid(&self, class: ClassId) -> Option<Vec<f64>> {
        self.index_of(class).and_then(|i| self.centroid_at(i))
    }

    /// Logits aligned with `classes()`: negative distance (or similarity)
    /// from x to each populated centroid, `-inf` for empty slots.
    pub fn logits(&self, x: &[f64], metric: NcmMetric) -> Vec<f64> {
        self.classes
            .iter()
            .enumerate()
            .map(|(i, _)| match self.centroid_at(i) {
                None => f64::NEG_INFINITY,
                Some(m) => match metric {
                    NcmMetric::Euclidean => -linalg::euclidean(&m, x),
                    NcmMetric::Cosine => linalg::cosine(&m, x),
                    NcmMetric::Dot => linalg::dot(&m, x),
                },
            })
            .collect()
    }
}

/// Class posterior as the softmax of negative distances to class means.
pub fn ncm_predict(store: &CentroidStore, x: &[f64], metric: NcmMetric) -> Result<Vec<f64>> {
    if store.counts.iter().all(|&c| c == 0) {
        return Err(Error::EmptyInput("centroid store has no populated class"));
    }
    Ok(linalg::softmax(&store.logits(x, metric)))
}

// ---------------------------------------------------------------------------
// Linear head

/// Per-class weight row and bias over the feature space.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LinearHead {
    dim: usize,
    classes: Vec<ClassId>,
    rows: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

impl LinearHead {
    pub fn new(dim: usize) -> Self {
        LinearHead {
            dim,
            classes: Vec::new(),
            rows: Vec::new(),
            biases: Vec::new(),
        }
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn index_of(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// New classes start with a zero row and zero bias: a neutral
    /// pre-softmax contribution that leaves existing logits untouched.
    pub fn admit(&mut self, class: ClassId) -> Result<()> {
        if self.index_of(class).is_some() {
            return Err(Error::DuplicateClass(class.0));
        }
        self.classes.push(class);
        self.rows.push(vec![0.0; self.dim]);
        self.biases.push(0.0);
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| linalg::dot(w, x) + b)
            .collect()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

// ---------------------------------------------------------------------------
// Cosine head

/// Cosine classifier with a learnable temperature:
/// `logit_i = s * (w_i / ||w_i||) . (x / ||x||)`. Zero rows (admitted but
/// never imprinted) score `-inf`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CosineHead {
    dim: usize,
    classes: Vec<ClassId>,
    rows: Vec<Vec<f64>>,
    pub temperature: f64,
}

impl CosineHead {
    pub fn new(dim: usize, temperature: f64) -> Result<Self> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::InvalidSpec("temperature must be > 0".into()));
        }
        Ok(CosineHead {
            dim,
            classes: Vec::new(),
            rows: Vec::new(),
            temperature,
        })
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn index_of(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn admit(&mut self, class: ClassId) -> Result<()> {
        if self.index_of(class).is_some() {
            return Err(Error::DuplicateClass(class.0));
        }
        self.classes.push(class);
        self.rows.push(vec![0.0; self.dim]);
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let nx = linalg::norm(x);
        if nx == 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok(self
            .rows
            .iter()
            .map(|w| {
                let nw = linalg::norm(w);
                if nw == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    self.temperature * linalg::dot(w, x) / (nw * nx)
                }
            })
            .collect())
    }

    /// Sets one weight row directly (imprinting a centroid).
    pub fn imprint_row(&mut self, class: ClassId, centroid: &[f64]) -> Result<()> {
        let slot = self
            .index_of(class)
            .ok_or(Error::UnknownClass(class.0))?;
        if centroid.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: centroid.len(),
            });
        }
        self.rows[slot].copy_from_slice(centroid);
        Ok(())
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Sets every weight row of `head` to the class centroid from `store`
/// (normalization happens at scoring time). Errors if any head class has no
/// samples in the store.
pub fn imprint_weights(head: &mut CosineHead, store: &CentroidStore) -> Result<()> {
    for class in head.classes.clone() {
        let centroid = store
            .centroid(class)
            .ok_or(Error::EmptyClassSlot(class.0))?;
        head.imprint_row(class, &centroid)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Exemplar-tuning head

/// Class representation `C_i = centroid_i + r_i` where the centroid averages
/// normalized features and `r_i` is a learnable residual starting at zero.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExemplarTuningHead {
    store: CentroidStore,
    residuals: Vec<Vec<f64>>,
    pub similarity: Similarity,
}

impl ExemplarTuningHead {
    pub fn new(dim: usize, similarity: Similarity) -> Self {
        ExemplarTuningHead {
            store: CentroidStore::new(dim, true),
            residuals: Vec::new(),
            similarity,
        }
    }

    pub fn dim(&self) -> usize {
        self.store.dim()
    }

    pub fn classes(&self) -> &[ClassId] {
        self.store.classes()
    }

    pub fn index_of(&self, class: ClassId) -> Option<usize> {
        self.store.index_of(class)
    }

    pub fn store(&self) -> &CentroidStore {
        &self.store
    }

    pub fn admit(&mut self, class: ClassId) -> Result<()> {
        self.store.admit(class)?;
        self.residuals.push(vec![0.0; self.store.dim()]);
        Ok(())
    }

    pub fn update_centroid(&mut self, class: ClassId, x: &[f64]) -> Result<()> {
        if self.store.index_of(class).is_none() {
            self.residuals.push(vec![0.0; self.store.dim()]);
        }
        self.store.update(class, x)
    }

    /// `C_i` for a populated slot; empty slots have no representation yet.
    pub fn representation_at(&self, slot: usize) -> Option<Vec<f64>> {
        self.store.centroid_at(slot).map(|mut c| {
            for (v, r) in c.iter_mut().zip(&self.residuals[slot]) {
                *v += r;
            }
            c
        })
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.classes().is_empty() {
            return Err(Error::EmptyInput("exemplar head has no classes"));
        }
        let mut out = Vec::with_capacity(self.classes().len());
        for slot in 0..self.classes().len() {
            let logit = match self.representation_at(slot) {
                None => f64::NEG_INFINITY,
                Some(rep) => match self.similarity {
                    Similarity::Dot => linalg::dot(&rep, x),
                    Similarity::Cosine => {
                        if linalg::norm(x) == 0.0 {
                            return Err(Error::ZeroNorm);
                        }
                        linalg::cosine(&rep, x)
                    }
                    Similarity::Euclidean => -linalg::euclidean(&rep, x),
                },
            };
            out.push(logit);
        }
        Ok(out)
    }

    pub fn residuals(&self) -> &[Vec<f64>] {
        &self.residuals
    }

    pub fn residuals_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.residuals
    }
}

// ---------------------------------------------------------------------------
// Head enum

/// Any classifier head, as used by the streaming learner.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Linear(LinearHead),
    Cosine(CosineHead),
    Centroid {
        store: CentroidStore,
        metric: NcmMetric,
    },
    Exemplar(ExemplarTuningHead),
}

impl Head {
    pub fn dim(&self) -> usize {
        match self {
            Head::Linear(h) => h.dim,
            Head::Cosine(h) => h.dim,
            Head::Centroid { store, .. } => store.dim(),
            Head::Exemplar(h) => h.dim(),
        }
    }

    pub fn classes(&self) -> &[ClassId] {
        match self {
            Head::Linear(h) => h.classes(),
            Head::Cosine(h) => h.classes(),
            Head::Centroid { store, .. } => store.classes(),
            Head::Exemplar(h) => h.classes(),
        }
    }

    pub fn index_of(&self, class: ClassId) -> Option<usize> {
        self.classes().iter().position(|&c| c == class)
    }

    pub fn admit_class(&mut self, class: ClassId) -> Result<()> {
        match self {
            Head::Linear(h) => h.admit(class),
            Head::Cosine(h) => h.admit(class),
            Head::Centroid { store, .. } => store.admit(class).map(|_| ()),
            Head::Exemplar(h) => h.admit(class),
        }
    }

    pub fn logits(&self, feats: &[f64]) -> Result<Vec<f64>> {
        match self {
            Head::Linear(h) => Ok(h.logits(feats)),
            Head::Cosine(h) => h.logits(feats),
            Head::Centroid { store, metric } => Ok(store.logits(feats, *metric)),
            Head::Exemplar(h) => h.logits(feats),
        }
    }

    pub fn probs(&self, feats: &[f64]) -> Result<Vec<f64>> {
        Ok(linalg::softmax(&self.logits(feats)?))
    }

    /// Per-class vectors for minimum-distance OOD scoring: centroids (plus
    /// residuals) for instance-based heads, weight rows for parametric ones.
    /// Unpopulated slots are skipped.
    pub fn class_representations(&self) -> Vec<Vec<f64>> {
        match self {
            Head::Linear(h) => h.rows.clone(),
            Head::Cosine(h) => h.rows.clone(),
            Head::Centroid { store, .. } => (0..store.classes().len())
                .filter_map(|i| store.centroid_at(i))
                .collect(),
            Head::Exemplar(h) => (0..h.classes().len())
                .filter_map(|i| h.representation_at(i))
                .collect(),
        }
    }

    /// Scoring cost in MACs for k known classes: `d*k`, plus `d` when the
    /// input is normalized first (cosine scoring).
    pub fn scoring_macs(&self, k: usize) -> u64 {
        let d = self.dim() as u64;
        let k = k as u64;
        let normalizes = matches!(self, Head::Cosine(_))
            || matches!(
                self,
                Head::Centroid {
                    metric: NcmMetric::Cosine,
                    ..
                }
            )
            || matches!(
                self,
                Head::Exemplar(ExemplarTuningHead {
                    similarity: Similarity::Cosine,
                    ..
                })
            );
        d * k + if normalizes { d } else { 0 }
    }

    pub fn trainable_len(&self) -> usize {
        match self {
            Head::Linear(h) => h.classes.len() * (h.dim + 1),
            Head::Cosine(h) => 1 + h.classes.len() * h.dim,
            Head::Centroid { .. } => 0,
            Head::Exemplar(h) => h.classes().len() * h.dim(),
        }
    }

    /// Flattens gradient-trainable parameters. Layouts append new classes at
    /// the end so velocity buffers stay aligned across admissions:
    /// linear = per-class `[w, b]` chunks; cosine = `[s, rows...]`;
    /// exemplar = residual rows; centroid heads have none.
    pub fn append_params(&self, out: &mut Vec<f64>) {
        match self {
            Head::Linear(h) => {
                for (row, b) in h.rows.iter().zip(&h.biases) {
                    out.extend_from_slice(row);
                    out.push(*b);
                }
            }
            Head::Cosine(h) => {
                out.push(h.temperature);
                for row in &h.rows {
                    out.extend_from_slice(row);
                }
            }
            Head::Centroid { .. } => {}
            Head::Exemplar(h) => {
                for r in &h.residuals {
                    out.extend_from_slice(r);
                }
            }
        }
    }

    pub fn load_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.trainable_len() {
            return Err(Error::ShapeMismatch {
                expected: self.trainable_len(),
                got: src.len(),
            });
        }
        match self {
            Head::Linear(h) => {
                let d = h.dim;
                for (i, chunk) in src.chunks_exact(d + 1).enumerate() {
                    h.rows[i].copy_from_slice(&chunk[..d]);
                    h.biases[i] = chunk[d];
                }
            }
            Head::Cosine(h) => {
                h.temperature = src[0];
                let d = h.dim;
                for (i, chunk) in src[1..].chunks_exact(d).enumerate() {
                    h.rows[i].copy_from_slice(chunk);
                }
            }
            Head::Centroid { .. } => {}
            Head::Exemplar(h) => {
                let d = h.dim();
                for (i, chunk) in src.chunks_exact(d).enumerate() {
                    h.residuals[i].copy_from_slice(chunk);
                }
            }
        }
        Ok(())
    }

    /// Accumulates parameter gradients for `dlogits` at input `feats` into
    /// `grad` (this head's flat layout), and the input-feature gradient into
    /// `dfeats` when requested. Entries whose logit was `-inf` must carry a
    /// zero `dlogit`.
    pub fn backprop(
        &self,
        feats: &[f64],
        dlogits: &[f64],
        grad: &mut [f64],
        mut dfeats: Option<&mut [f64]>,
    ) {
        debug_assert_eq!(grad.len(), self.trainable_len());
        match self {
            Head::Linear(h) => {
                let d = h.dim;
                for (i, &dl) in dlogits.iter().enumerate() {
                    if dl == 0.0 {
                        continue;
                    }
                    let base = i * (d + 1);
                    for j in 0..d {
                        grad[base + j] += dl * feats[j];
                    }
                    grad[base + d] += dl;
                    if let Some(df) = dfeats.as_deref_mut() {
                        for (dfj, wj) in df.iter_mut().zip(&h.rows[i]) {
                            *dfj += dl * wj;
                        }
                    }
                }
            }
            Head::Cosine(h) => {
                let d = h.dim;
                let nx = linalg::norm(feats);
                debug_assert!(nx > 0.0);
                let xhat: Vec<f64> = feats.iter().map(|v| v / nx).collect();
                for (i, &dl) in dlogits.iter().enumerate() {
                    if dl == 0.0 {
                        continue;
                    }
                    let w = &h.rows[i];
                    let nw = linalg::norm(w);
                    if nw == 0.0 {
                        continue;
                    }
                    let what: Vec<f64> = w.iter().map(|v| v / nw).collect();
                    let cos = linalg::dot(&what, &xhat);
                    grad[0] += dl * cos;
                    let base = 1 + i * d;
                    for j in 0..d {
                        grad[base + j] += dl * h.temperature * (xhat[j] - cos * what[j]) / nw;
                    }
                    if let Some(df) = dfeats.as_deref_mut() {
                        for j in 0..d {
                            df[j] += dl * h.temperature * (what[j] - cos * xhat[j]) / nx;
                        }
                    }
                }
            }
            Head::Centroid { .. } => {}
            Head::Exemplar(h) => {
                let d = h.dim();
                for (i, &dl) in dlogits.iter().enumerate() {
                    if dl == 0.0 {
                        continue;
                    }
                    let Some(rep) = h.representation_at(i) else {
                        continue;
                    };
                    let base = i * d;
                    match h.similarity {
                        Similarity::Dot => {
                            for j in 0..d {
                                grad[base + j] += dl * feats[j];
                            }
                            if let Some(df) = dfeats.as_deref_mut() {
                                for j in 0..d {
                                    df[j] += dl * rep[j];
                                }
                            }
                        }
                        Similarity::Cosine => {
                            let nc = linalg::norm(&rep);
                            let nx = linalg::norm(feats);
                            if nc == 0.0 || nx == 0.0 {
                                continue;
                            }
                            let chat: Vec<f64> = rep.iter().map(|v| v / nc).collect();
                            let xhat: Vec<f64> = feats.iter().map(|v| v / nx).collect();
                            let cos = linalg::dot(&chat, &xhat);
                            for j in 0..d {
                                grad[base + j] += dl * (xhat[j] - cos * chat[j]) / nc;
                            }
                            if let Some(df) = dfeats.as_deref_mut() {
                                for j in 0..d {
                                    df[j] += dl * (chat[j] - cos * xhat[j]) / nx;
                                }
                            }
                        }
                        Similarity::Euclidean => {
                            let dist = linalg::euclidean(&rep, feats);
                            if dist < 1e-12 {
                                continue;
                            }
                            for j in 0..d {
                                let diff = rep[j] - feats[j];
                                grad[base + j] += -dl * diff / dist;
                                if let Some(df) = dfeats.as_deref_mut() {
                                    df[j] += dl * diff / dist;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const C0: ClassId = ClassId(0);
    const C1: ClassId = ClassId(1);
    const C2: ClassId = ClassId(2);

    #[test]
    fn ncm_single_class_is_certain() {
        let mut store = CentroidStore::new(2, false);
        store.update(C0, &[1.0, 0.0]).unwrap();
        let p = ncm_predict(&store, &[5.0, 5.0], NcmMetric::Euclidean).unwrap();
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn ncm_equidistant_centroids_split_evenly() {
        let mut store = CentroidStore::new(2, false);
        store.update(C0, &[1.0, 0.0]).unwrap();
        store.update(C1, &[-1.0, 0.0]).unwrap();
        let p = ncm_predict(&store, &[0.0, 3.0], NcmMetric::Euclidean).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ncm_matches_direct_softmax_of_negative_distances() {
        // Centroids at distances 1, 2, 3 from the query.
        let mut store = CentroidStore::new(1, false);
        store.update(C0, &[1.0]).unwrap();
        store.update(C1, &[2.0]).unwrap();
        store.update(C2, &[3.0]).unwrap();
        let p = ncm_predict(&store, &[0.0], NcmMetric::Euclidean).unwrap();

        // Independent oracle: direct evaluation.
        let e: Vec<f64> = [-1.0f64, -2.0, -3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (got, want) in p.iter().zip(e.iter().map(|v| v / z)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn first_update_sets_the_centroid() {
        let mut raw = CentroidStore::new(2, false);
        raw.update(C0, &[3.0, 4.0]).unwrap();
        assert_eq!(raw.centroid(C0).unwrap(), vec![3.0, 4.0]);

        let mut normed = CentroidStore::new(2, true);
        normed.update(C0, &[3.0, 4.0]).unwrap();
        assert_eq!(normed.centroid(C0).unwrap(), vec![0.6, 0.8]);
    }

    #[test]
    fn two_raw_samples_average() {
        let mut store = CentroidStore::new(2, false);
        store.update(C0, &[1.0, 0.0]).unwrap();
        store.update(C0, &[3.0, 2.0]).unwrap();
        assert_eq!(store.centroid(C0).unwrap(), vec![2.0, 1.0]);
    }

    #[test]
    fn zero_norm_update_fails_when_normalizing() {
        let mut store = CentroidStore::new(2, true);
        assert!(matches!(
            store.update(C0, &[0.0, 0.0]),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn incremental_centroid_equals_batch_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = CentroidStore::new(8, false);
        let mut batch = Vec::new();
        for _ in 0..100 {
            let x: Vec<f64> = (0..8).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            store.update(C0, &x).unwrap();
            batch.push(x);
        }
        // Batch-mean oracle.
        let mut mean = vec![0.0; 8];
        for x in &batch {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / 100.0;
            }
        }
        let inc = store.centroid(C0).unwrap();
        for (a, b) in inc.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn et_zero_residual_logits_equal_centroid_dot_products() {
        let mut head = ExemplarTuningHead::new(3, Similarity::Dot);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for c in 0..4u32 {
            for _ in 0..5 {
                let x: Vec<f64> =
                    (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                head.update_centroid(ClassId(c), &x).unwrap();
            }
        }
        let q = [0.3, -1.1, 0.7];
        let logits = head.logits(&q).unwrap();
        for (slot, logit) in logits.iter().enumerate() {
            let mu = head.store().centroid_at(slot).unwrap();
            assert!((logit - linalg::dot(&mu, &q)).abs() < 1e-12);
        }
    }

    #[test]
    fn et_prefers_class_matching_the_query() {
        let mut head = ExemplarTuningHead::new(2, Similarity::Dot);
        head.update_centroid(C0, &[1.0, 0.0]).unwrap();
        head.update_centroid(C1, &[0.0, 1.0]).unwrap();
        let logits = head.logits(&[1.0, 0.0]).unwrap();
        assert!(logits[0] > logits[1]);
        assert_eq!(linalg::argmax(&logits), Some(0));
    }

    #[test]
    fn et_logits_match_hand_evaluation_with_residuals() {
        let mut head = ExemplarTuningHead::new(2, Similarity::Dot);
        head.update_centroid(C0, &[1.0, 0.0]).unwrap();
        head.update_centroid(C1, &[0.0, 1.0]).unwrap();
        head.residuals_mut()[0].copy_from_slice(&[0.25, -0.5]);
        head.residuals_mut()[1].copy_from_slice(&[-1.0, 2.0]);

        let q = [2.0, 3.0];
        // Direct evaluation oracle: C_i = centroid + r_i, logit = C_i . q.
        let want0 = (1.0 + 0.25) * 2.0 + (0.0 - 0.5) * 3.0;
        let want1 = (0.0 - 1.0) * 2.0 + (1.0 + 2.0) * 3.0;
        let logits = head.logits(&q).unwrap();
        assert!((logits[0] - want0).abs() < 1e-12);
        assert!((logits[1] - want1).abs() < 1e-12);
    }

    #[test]
    fn cosine_logit_is_temperature_for_parallel_rows_zero_for_orthogonal() {
        let mut head = CosineHead::new(2, 4.0).unwrap();
        head.admit(C0).unwrap();
        head.admit(C1).unwrap();
        head.imprint_row(C0, &[2.0, 0.0]).unwrap();
        head.imprint_row(C1, &[0.0, -3.0]).unwrap();
        let logits = head.logits(&[5.0, 0.0]).unwrap();
        assert!((logits[0] - 4.0).abs() < 1e-12);
        assert!(logits[1].abs() < 1e-12);
    }

    #[test]
    fn imprint_sets_row_to_raw_centroid() {
        let mut store = CentroidStore::new(2, false);
        store.update(C0, &[3.0, 4.0]).unwrap();
        let mut head = CosineHead::new(2, 4.0).unwrap();
        head.admit(C0).unwrap();
        imprint_weights(&mut head, &store).unwrap();
        assert_eq!(head.rows()[0], vec![3.0, 4.0]);

        // Scoring the sample itself lands on its own class.
        let mut other = CentroidStore::new(2, false);
        other.update(C0, &[3.0, 4.0]).unwrap();
        other.update(C1, &[-5.0, 1.0]).unwrap();
        let mut head2 = CosineHead::new(2, 4.0).unwrap();
        head2.admit(C0).unwrap();
        head2.admit(C1).unwrap();
        imprint_weights(&mut head2, &other).unwrap();
        let logits = head2.logits(&[3.0, 4.0]).unwrap();
        assert_eq!(linalg::argmax(&logits), Some(0));
    }

    #[test]
    fn imprint_fails_on_empty_class() {
        let store = CentroidStore::new(2, false);
        let mut head = CosineHead::new(2, 1.0).unwrap();
        head.admit(C0).unwrap();
        assert!(matches!(
            imprint_weights(&mut head, &store),
            Err(Error::EmptyClassSlot(0))
        ));
    }

    #[test]
    fn imprinted_argmax_matches_cosine_ncm_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = CentroidStore::new(4, false);
        let mut head = CosineHead::new(4, 4.0).unwrap();
        for c in 0..5u32 {
            head.admit(ClassId(c)).unwrap();
            for _ in 0..3 {
                let x: Vec<f64> = (0..4)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) + c as f64)
                    .collect();
                store.update(ClassId(c), &x).unwrap();
            }
        }
        imprint_weights(&mut head, &store).unwrap();
        for _ in 0..100 {
            let q: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let a = linalg::argmax(&head.logits(&q).unwrap());
            let b = linalg::argmax(&store.logits(&q, NcmMetric::Cosine));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn frozen_map_is_identity_and_free() {
        let map = FeatureMap::Frozen { dim: 3 };
        assert_eq!(map.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
        assert_eq!(map.forward_macs(), 0);
        assert!(map.forward(&[1.0]).is_err());
    }

    #[test]
    fn identity_weight_single_layer_is_relu() {
        let mut mlp = Mlp::new(&[2, 2], 0).unwrap();
        mlp.load_params(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let out = mlp.forward_trace(&[1.5, -2.0]).into_output();
        assert_eq!(out, vec![1.5, 0.0]);
    }

    #[test]
    fn mlp_forward_matches_direct_matrix_oracle() {
        let mlp = Mlp::new(&[3, 4, 2], 7).unwrap();
        let mut params = Vec::new();
        mlp.append_params(&mut params);
        let x = [0.5, -1.0, 2.0];

        // Direct evaluation oracle from the flattened parameters.
        let w1 = &params[0..12];
        let b1 = &params[12..16];
        let w2 = &params[16..24];
        let b2 = &params[24..26];
        let mut h = [0.0; 4];
        for o in 0..4 {
            let mut acc = b1[o];
            for i in 0..3 {
                acc += w1[o * 3 + i] * x[i];
            }
            h[o] = acc.max(0.0);
        }
        let mut y = [0.0; 2];
        for o in 0..2 {
            let mut acc = b2[o];
            for i in 0..4 {
                acc += w2[o * 4 + i] * h[i];
            }
            y[o] = acc.max(0.0);
        }

        let got = mlp.forward_trace(&x).into_output();
        for (g, w) in got.iter().zip(&y) {
            assert!((g - w).abs() < 1e-12);
        }
        assert_eq!(mlp.forward_macs(), 12 + 8);
    }

    #[test]
    fn admissions_grow_heads_without_disturbing_old_logits() {
        let mut head = Head::Linear(LinearHead::new(2));
        head.admit_class(C0).unwrap();
        assert_eq!(head.classes().len(), 1);

        if let Head::Linear(h) = &mut head {
            h.rows[0].copy_from_slice(&[1.0, -1.0]);
            h.biases[0] = 0.5;
        }
        let x = [2.0, 1.0];
        let before = head.logits(&x).unwrap();
        head.admit_class(C1).unwrap();
        head.admit_class(C2).unwrap();
        let after = head.logits(&x).unwrap();
        assert_eq!(after.len(), 3);
        assert_eq!(before[0], after[0]);
        assert_eq!(after[1], 0.0);

        assert!(matches!(
            head.admit_class(C1),
            Err(Error::DuplicateClass(1))
        ));
    }

    #[test]
    fn admission_preserves_argmax_when_new_logit_is_smaller() {
        let mut head = Head::Linear(LinearHead::new(2));
        head.admit_class(C0).unwrap();
        head.admit_class(C1).unwrap();
        if let Head::Linear(h) = &mut head {
            h.rows[0].copy_from_slice(&[1.0, 0.0]);
            h.rows[1].copy_from_slice(&[0.0, 1.0]);
        }
        let x = [3.0, 1.0];
        let before = linalg::argmax(&head.logits(&x).unwrap());
        head.admit_class(C2).unwrap(); // zero row scores 0 < 3
        let after = linalg::argmax(&head.logits(&x).unwrap());
        assert_eq!(before, after);
    }

    #[test]
    fn et_param_roundtrip_and_growth_layout() {
        let mut head = Head::Exemplar(ExemplarTuningHead::new(2, Similarity::Dot));
        head.admit_class(C0).unwrap();
        let mut p = Vec::new();
        head.append_params(&mut p);
        assert_eq!(p, vec![0.0, 0.0]);
        head.load_params(&[1.0, 2.0]).unwrap();
        head.admit_class(C1).unwrap();
        let mut p2 = Vec::new();
        head.append_params(&mut p2);
        assert_eq!(p2, vec![1.0, 2.0, 0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = CentroidStore::new(3, false);
            let k = 1 + (seed as usize % 5);
            for c in 0..k {
                for _ in 0..2 {
                    let x: Vec<f64> =
                        (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    store.update(ClassId(c as u32), &x).unwrap();
                }
            }
            let q: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let p = ncm_predict(&store, &q, NcmMetric::Euclidean).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn centroids_are_permutation_invariant(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<Vec<f64>> = (0..20)
                .map(|_| (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            let mut fwd = CentroidStore::new(4, false);
            let mut rev = CentroidStore::new(4, false);
            for x in &xs {
                fwd.update(C0, x).unwrap();
            }
            for x in xs.iter().rev() {
                rev.update(C0, x).unwrap();
            }
            let a = fwd.centroid(C0).unwrap();
            let b = rev.centroid(C0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn cosine_scores_ignore_positive_rescaling(scale_x in 0.1f64..10.0, scale_w in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let w: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let x: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();

            let mut h1 = CosineHead::new(4, 4.0).unwrap();
            h1.admit(C0).unwrap();
            h1.imprint_row(C0, &w).unwrap();
            let mut h2 = CosineHead::new(4, 4.0).unwrap();
            h2.admit(C0).unwrap();
            let w2: Vec<f64> = w.iter().map(|v| v * scale_w).collect();
            h2.imprint_row(C0, &w2).unwrap();

            let x2: Vec<f64> = x.iter().map(|v| v * scale_x).collect();
            let a = h1.logits(&x).unwrap()[0];
            let b = h2.logits(&x2).unwrap()[0];
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
