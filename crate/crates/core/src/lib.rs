//! Streaming evaluation harness for open-world classifiers.
//!
//! The crate feeds a heavy-tailed, open-world class sequence to a pluggable
//! learner one sample at a time. At every step the learner predicts among the
//! classes it currently knows, produces an out-of-distribution score for the
//! "never seen this class" decision, is shown the true label, and may train
//! according to its update strategy. All inference and training compute is
//! metered in multiply-accumulate operations (MACs).
//!
//! Modules:
//! - [`dataset`]: labeled feature vectors, embedding file I/O, synthetic
//!   Gaussian-mixture generation.
//! - [`sequence`]: Zipf-distributed stream construction and head/tail,
//!   pretrain/novel class buckets.
//! - [`heads`]: classifier heads (linear, cosine, centroid, exemplar-tuning)
//!   and a small MLP feature map.
//! - [`training`]: losses, gradients, SGD with momentum, distillation and
//!   Fisher-penalty regularizers, episodic prototype pretraining.
//! - [`ood`]: unseen-class scoring (minimum-distance, max-softmax) and
//!   detection metrics (AUROC, best-threshold F1).
//! - [`harness`]: the per-sample streaming loop, the MAC meter, and learner
//!   state.
//! - [`metrics`]: accuracy metrics computed from an evaluation log.
//! - [`config`] / [`runner`]: experiment configuration, execution, and
//!   report emission used by the CLI.

pub mod config;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod heads;
mod linalg;
pub mod metrics;
pub mod ood;
pub mod runner;
pub mod sequence;
pub mod training;

pub use error::{Error, Result};
