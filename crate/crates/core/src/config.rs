//! Experiment configuration.
//!
//! One JSON file describes a whole experiment: the data source, the sequence
//! shape, the learner and its hyperparameters, the update strategy, the OOD
//! scorer, and the seeds. Every field with a published default is pre-filled
//! (momentum 0.9, batch 64, offline phases of 4 epochs every 5,000 samples,
//! imprint-to-finetune switch at 10,000 samples, cosine temperature 4,
//! distillation temperature 2, head-only learning rate 0.1 and full-network
//! learning rate 0.01), so a minimal config names only the data and the
//! learner kind.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dataset::GaussianMixtureSpec;
use crate::error::{Error, Result};
use crate::heads::{NcmMetric, Similarity};
use crate::ood::{MdtMetric, OodScorerKind};
use crate::training::{
    scaled_imprint_switch, UpdateStrategy, DEFAULT_INTERVAL_SAMPLES, DEFAULT_OFFLINE_EPOCHS,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Binary embedding file plus JSON role manifest.
    Embeddings { path: PathBuf, manifest: PathBuf },
    /// Synthetic Gaussian mixture.
    Synthetic(GaussianMixtureSpec),
}

/// Sequence shape; the per-run seed comes from `ExperimentConfig::seeds`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SequenceSettings {
    /// How many classes to stream; defaults to every streamable class.
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default = "default_zipf_s")]
    pub zipf_s: f64,
    pub total_samples: usize,
    #[serde(default = "default_head_threshold")]
    pub head_threshold: usize,
}

fn default_zipf_s() -> f64 {
    1.0
}

fn default_head_threshold() -> usize {
    50
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    /// Nearest class mean over frozen features, updated per sample.
    Ncm,
    /// Linear head over frozen features, trained offline.
    FineTune,
    /// Trainable MLP backbone plus linear head, trained offline.
    Standard,
    /// Cosine head imprinted from centroids, fine-tuned after the switch.
    WeightImprint,
    /// Centroid-plus-residual class representations; centroids update per
    /// sample, residuals train offline.
    ExemplarTuning,
    /// Linear head (or full network) with distillation from the frozen
    /// pretrained copy.
    Lwf,
    /// Linear head (or full network) anchored to the pretrained weights by
    /// the Fisher diagonal.
    Ewc,
}

impl LearnerKind {
    pub fn slug(self) -> &'static str {
        match self {
            LearnerKind::Ncm => "ncm",
            LearnerKind::FineTune => "finetune",
            LearnerKind::Standard => "standard",
            LearnerKind::WeightImprint => "weight_imprint",
            LearnerKind::ExemplarTuning => "exemplar_tuning",
            LearnerKind::Lwf => "lwf",
            LearnerKind::Ewc => "ewc",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    #[default]
    Frozen,
    /// Hidden layer widths; the last entry is the feature dimension heads
    /// operate in.
    Mlp { hidden: Vec<usize> },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    pub kind: LearnerKind,
    #[serde(default)]
    pub backbone: BackboneConfig,
    /// Default: 0.1 for head-only training, 0.01 when the backbone trains.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Cosine-head temperature initialization.
    #[serde(default = "default_temperature_s")]
    pub temperature_s: f64,
    #[serde(default = "default_lwf_temperature")]
    pub lwf_temperature: f64,
    #[serde(default = "default_lwf_weight")]
    pub lwf_weight: f64,
    #[serde(default = "default_ewc_lambda")]
    pub ewc_lambda: f64,
    /// Share of the pretraining pool held out for Fisher estimation.
    #[serde(default = "default_fisher_fraction")]
    pub ewc_fisher_fraction: f64,
    #[serde(default)]
    pub et_similarity: Similarity,
    #[serde(default)]
    pub ncm_metric: NcmMetric,
    /// Normalize features before centroid accumulation (nearest-class-mean
    /// head only; the exemplar-tuning centroid always normalizes).
    #[serde(default)]
    pub ncm_normalize: bool,
    /// Exemplar-tuning ablation switch: freeze residuals at zero.
    #[serde(default = "default_true")]
    pub train_residuals: bool,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_batch_size() -> usize {
    64
}

fn default_temperature_s() -> f64 {
    4.0
}

fn default_lwf_temperature() -> f64 {
    2.0
}

fn default_lwf_weight() -> f64 {
    1.0
}

fn default_ewc_lambda() -> f64 {
    100.0
}

fn default_fisher_fraction() -> f64 {
    0.2
}

fn default_true() -> bool {
    true
}

impl LearnerConfig {
    pub fn new(kind: LearnerKind) -> Self {
        LearnerConfig {
            kind,
            backbone: BackboneConfig::Frozen,
            learning_rate: None,
            momentum: default_momentum(),
            batch_size: default_batch_size(),
            temperature_s: default_temperature_s(),
            lwf_temperature: default_lwf_temperature(),
            lwf_weight: default_lwf_weight(),
            ewc_lambda: default_ewc_lambda(),
            ewc_fisher_fraction: default_fisher_fraction(),
            et_similarity: Similarity::default(),
            ncm_metric: NcmMetric::default(),
            ncm_normalize: false,
            train_residuals: true,
        }
    }

    /// Whether the feature map trains during the stream.
    pub fn trains_backbone(&self) -> bool {
        matches!(self.backbone, BackboneConfig::Mlp { .. })
            && matches!(
                self.kind,
                LearnerKind::Standard | LearnerKind::Lwf | LearnerKind::Ewc
            )
    }

    pub fn resolved_learning_rate(&self) -> f64 {
        self.learning_rate
            .unwrap_or(if self.trains_backbone() { 0.01 } else { 0.1 })
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    OfflineEvery,
    InstancePerSample,
    Hybrid,
    ImprintThenFinetune,
}

/// Optional strategy override; anything unspecified falls back to the
/// learner kind's default schedule.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StrategySettings {
    #[serde(default)]
    pub kind: Option<StrategyKind>,
    #[serde(default)]
    pub interval_samples: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub switch_at: Option<usize>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PretrainMode {
    /// Plain softmax cross-entropy pretraining.
    Softmax,
    /// Episodic prototype pretraining of the MLP backbone
    /// (n-shot k-way episodes with a stepped learning-rate decay).
    Episodic {
        #[serde(default = "default_shots")]
        shots: usize,
        #[serde(default)]
        ways: Option<usize>,
        #[serde(default = "default_episodes_per_epoch")]
        episodes_per_epoch: usize,
        #[serde(default = "default_lr_decay_every")]
        lr_decay_every: usize,
        #[serde(default = "default_lr_decay_factor")]
        lr_decay_factor: f64,
    },
}

fn default_shots() -> usize {
    5
}

fn default_episodes_per_epoch() -> usize {
    20
}

fn default_lr_decay_every() -> usize {
    40
}

fn default_lr_decay_factor() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "default_pretrain_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default = "default_pretrain_mode")]
    pub mode: PretrainMode,
}

fn default_pretrain_epochs() -> usize {
    10
}

fn default_pretrain_mode() -> PretrainMode {
    PretrainMode::Softmax
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: default_pretrain_epochs(),
            batch_size: default_batch_size(),
            learning_rate: None,
            mode: default_pretrain_mode(),
        }
    }
}

fn default_ood() -> OodScorerKind {
    OodScorerKind::Mdt {
        metric: MdtMetric::Cosine,
    }
}

fn default_rolling_window() -> usize {
    crate::metrics::DEFAULT_ROLLING_WINDOW
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub sequence: SequenceSettings,
    pub learner: LearnerConfig,
    #[serde(default)]
    pub strategy: StrategySettings,
    #[serde(default = "default_ood")]
    pub ood: OodScorerKind,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "default_rolling_window")]
    pub rolling_window: usize,
    /// Output directory; the CLI `--out` flag overrides it.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.sequence.total_samples == 0 {
            return Err(Error::Config("total_samples must be >= 1".into()));
        }
        if self.sequence.zipf_s.is_nan() || self.sequence.zipf_s <= 0.0 {
            return Err(Error::Config("zipf_s must be > 0".into()));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if matches!(self.learner.kind, LearnerKind::Standard)
            && !matches!(self.learner.backbone, BackboneConfig::Mlp { .. })
        {
            return Err(Error::Config(
                "standard training requires an mlp backbone".into(),
            ));
        }
        if let BackboneConfig::Mlp { hidden } = &self.learner.backbone {
            if hidden.is_empty() || hidden.contains(&0) {
                return Err(Error::Config(
                    "mlp backbone needs nonzero hidden widths".into(),
                ));
            }
        }
        if matches!(self.pretrain.mode, PretrainMode::Episodic { .. })
            && !matches!(self.learner.backbone, BackboneConfig::Mlp { .. })
        {
            return Err(Error::Config(
                "episodic pretraining only applies to an mlp backbone".into(),
            ));
        }
        if !(self.learner.momentum >= 0.0 && self.learner.momentum < 1.0) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.learner.ewc_fisher_fraction > 0.0 && self.learner.ewc_fisher_fraction <= 1.0) {
            return Err(Error::Config(
                "ewc_fisher_fraction must lie in (0, 1]".into(),
            ));
        }
        if self.learner.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if matches!(self.learner.kind, LearnerKind::ExemplarTuning)
            && !self.learner.train_residuals
            && !matches!(
                self.strategy.kind,
                None | Some(StrategyKind::InstancePerSample)
            )
        {
            return Err(Error::Config(
                "train_residuals = false requires an instance-only strategy".into(),
            ));
        }
        self.resolve_strategy()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// The update strategy with learner-kind defaults and the imprint switch
    /// scaled to the stream length. Exemplar tuning with frozen residuals
    /// degrades to instance-only updates.
    pub fn resolve_strategy(&self) -> UpdateStrategy {
        let default_kind = match self.learner.kind {
            LearnerKind::Ncm => StrategyKind::InstancePerSample,
            LearnerKind::ExemplarTuning if !self.learner.train_residuals => {
                StrategyKind::InstancePerSample
            }
            LearnerKind::ExemplarTuning => StrategyKind::Hybrid,
            LearnerKind::WeightImprint => StrategyKind::ImprintThenFinetune,
            _ => StrategyKind::OfflineEvery,
        };
        let kind = self.strategy.kind.unwrap_or(default_kind);
        let interval = self
            .strategy
            .interval_samples
            .unwrap_or(DEFAULT_INTERVAL_SAMPLES);
        let epochs = self.strategy.epochs.unwrap_or(DEFAULT_OFFLINE_EPOCHS);
        let switch_at = self
            .strategy
            .switch_at
            .unwrap_or_else(|| scaled_imprint_switch(self.sequence.total_samples));
        match kind {
            StrategyKind::OfflineEvery => UpdateStrategy::OfflineEvery {
                interval_samples: interval,
                epochs,
            },
            StrategyKind::InstancePerSample => UpdateStrategy::InstancePerSample,
            StrategyKind::Hybrid => UpdateStrategy::Hybrid {
                interval_samples: interval,
                epochs,
            },
            StrategyKind::ImprintThenFinetune => UpdateStrategy::ImprintThenFinetune {
                switch_at,
                interval_samples: interval,
                epochs,
            },
        }
    }

    /// Identifies the dataset + sequence shape so reports refuse to mix
    /// incompatible runs.
    pub fn data_fingerprint(&self) -> String {
        format!(
            "{}|{}",
            serde_json::to_string(&self.data).unwrap_or_default(),
            serde_json::to_string(&self.sequence).unwrap_or_default()
        )
    }
}
