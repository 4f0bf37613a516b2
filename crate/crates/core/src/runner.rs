//! Experiment execution: pretraining, per-seed streaming runs, artifact
//! emission, multi-seed aggregation, and comparison reports.
//!
//! Output layout under the chosen directory:
//! `manifests/seq_<seed>.json` (stream tasks), `logs/<learner>_seed<seed>.ndjson`
//! (evaluation logs), `reports/run_<learner>_seed<seed>.json` (run summaries),
//! `reports/rolling_*.csv` and `reports/roc_*.csv` (plot data),
//! `reports/aggregate_<learner>.json` (mean and std across seeds), and
//! `checkpoints/<learner>_seed<seed>.json` (learner state for resume or
//! inspection).

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{BackboneConfig, DataSource, ExperimentConfig, LearnerKind, PretrainMode};
use crate::dataset::{load_embeddings, synth_gaussian, ClassId, Dataset};
use crate::error::{Error, Result};
use crate::harness::{
    recompute_total_macs, run_stream, CostSpec, EvalLog, Learner, Regularizer,
};
use crate::heads::{
    imprint_weights, CentroidStore, CosineHead, ExemplarTuningHead, FeatureMap, Head, LinearHead,
    Mlp,
};
use crate::metrics::{self, MetricReport};
use crate::ood::roc_points;
use crate::sequence::{build_sequence, SequenceSpec, StreamTask};
use crate::training::{
    proto_episode_loss, xent_loss_and_grad, EwcState, LabeledExample, Model, SgdState,
    UpdateStrategy,
};

const MLP_INIT_SALT: u64 = 0xa5a5_5a5a_1357_9bdf;
const PRETRAIN_SHUFFLE_SALT: u64 = 0xc3c3_3c3c_2468_ace0;

/// Everything recorded about one completed run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunSummary {
    pub learner: String,
    pub seed: u64,
    pub strategy: UpdateStrategy,
    pub stream_len: usize,
    pub mac_total: u64,
    /// The meter re-derived from the log; always equals `mac_total`.
    pub mac_recomputed: u64,
    pub metrics: MetricReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    pub data_fingerprint: String,
}

/// In-memory products of one run (the CLI persists them, the C API returns
/// them directly).
#[derive(Debug, Clone)]
pub struct RunProducts {
    pub task: StreamTask,
    pub log: EvalLog,
    pub summary: RunSummary,
    pub learner: Learner,
}

pub fn build_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    match &config.data {
        DataSource::Embeddings { path, manifest } => load_embeddings(path, manifest),
        DataSource::Synthetic(spec) => synth_gaussian(spec),
    }
}

fn sequence_spec(config: &ExperimentConfig, dataset: &Dataset, seed: u64) -> SequenceSpec {
    SequenceSpec {
        num_classes: config
            .sequence
            .num_classes
            .unwrap_or_else(|| dataset.stream_pool().len()),
        zipf_s: config.sequence.zipf_s,
        total_samples: config.sequence.total_samples,
        head_threshold: config.sequence.head_threshold,
        seed,
    }
}

fn pool_examples(dataset: &Dataset) -> Vec<LabeledExample<'_>> {
    dataset
        .pretrain_pool()
        .iter()
        .map(|&i| {
            let s = &dataset.samples()[i];
            (s.features.as_slice(), s.label)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn train_softmax_phase(
    map: &mut FeatureMap,
    head: &mut Head,
    train_map: bool,
    examples: &[LabeledExample],
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    momentum: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if examples.is_empty() {
        return Ok(());
    }
    let mut sgd = SgdState::new(learning_rate, momentum)?;
    let mut indices: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(batch_size.max(1)) {
            let batch: Vec<LabeledExample> = chunk.iter().map(|&i| examples[i]).collect();
            let mut model = Model::new(map, head, train_map);
            let (_, grad) = xent_loss_and_grad(&mut model, &batch)?;
            let mut params = model.params();
            sgd.step(&mut params, &grad)?;
            model.set_params(&params)?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_episodic_phase(
    map: &mut FeatureMap,
    examples: &[LabeledExample],
    shots: usize,
    ways: Option<usize>,
    episodes_per_epoch: usize,
    epochs: usize,
    learning_rate: f64,
    momentum: f64,
    lr_decay_every: usize,
    lr_decay_factor: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut by_class: BTreeMap<ClassId, Vec<&[f64]>> = BTreeMap::new();
    for &(x, y) in examples {
        by_class.entry(y).or_default().push(x);
    }
    // A class must supply disjoint support and query sets.
    let eligible: Vec<ClassId> = by_class
        .iter()
        .filter(|(_, xs)| xs.len() >= 2 * shots)
        .map(|(&c, _)| c)
        .collect();
    if eligible.len() < 2 {
        return Err(Error::Config(
            "episodic pretraining needs >= 2 classes with 2*shots samples".into(),
        ));
    }
    let ways = ways.unwrap_or(30).min(eligible.len()).max(2);

    let mut sgd = SgdState::new(learning_rate, momentum)?;
    for epoch in 0..epochs {
        // Stepped decay of the episodic learning rate.
        sgd.learning_rate =
            learning_rate * lr_decay_factor.powi((epoch / lr_decay_every.max(1)) as i32);
        for _ in 0..episodes_per_epoch {
            let mut classes = eligible.clone();
            classes.shuffle(rng);
            classes.truncate(ways);
            let mut support = Vec::with_capacity(ways * shots);
            let mut query = Vec::with_capacity(ways * shots);
            for &c in &classes {
                let mut xs = by_class[&c].clone();
                xs.shuffle(rng);
                for x in xs.iter().take(shots) {
                    support.push((*x, c));
                }
                for x in xs.iter().skip(shots).take(shots) {
                    query.push((*x, c));
                }
            }
            let (_, grad) = proto_episode_loss(map, &support, &query)?;
            let mut params = Vec::new();
            map.append_params(&mut params);
            sgd.step(&mut params, &grad)?;
            map.load_params(&params)?;
        }
    }
    Ok(())
}

/// Pretrains the map on the pool (softmax with a throwaway linear head, or
/// episodically) for learners whose own head is not gradient-trained during
/// pretraining.
fn pretrain_backbone(
    map: &mut FeatureMap,
    config: &ExperimentConfig,
    examples: &[LabeledExample],
    pretrain_classes: &[ClassId],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if !matches!(map, FeatureMap::Mlp(_)) {
        return Ok(());
    }
    let lr = config.pretrain.learning_rate.unwrap_or(0.01);
    match config.pretrain.mode {
        PretrainMode::Softmax => {
            let mut temp_head = Head::Linear(LinearHead::new(map.output_dim()));
            for &c in pretrain_classes {
                temp_head.admit_class(c)?;
            }
            train_softmax_phase(
                map,
                &mut temp_head,
                true,
                examples,
                config.pretrain.epochs,
                config.pretrain.batch_size,
                lr,
                config.learner.momentum,
                rng,
            )
        }
        PretrainMode::Episodic {
            shots,
            ways,
            episodes_per_epoch,
            lr_decay_every,
            lr_decay_factor,
        } => train_episodic_phase(
            map,
            examples,
            shots,
            ways,
            episodes_per_epoch,
            config.pretrain.epochs,
            lr,
            config.learner.momentum,
            lr_decay_every,
            lr_decay_factor,
            rng,
        ),
    }
}

/// Builds and pretrains the learner for one run.
pub fn pretrain_learner(
    config: &ExperimentConfig,
    dataset: &Dataset,
    seed: u64,
) -> Result<Learner> {
    let lcfg = &config.learner;
    let input_dim = dataset.dim();
    let examples = pool_examples(dataset);
    let pretrain_classes: Vec<ClassId> = dataset.pretrain_classes().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PRETRAIN_SHUFFLE_SALT);

    let mut map = match &lcfg.backbone {
        BackboneConfig::Frozen => FeatureMap::Frozen { dim: input_dim },
        BackboneConfig::Mlp { hidden } => {
            let mut dims = vec![input_dim];
            dims.extend_from_slice(hidden);
            FeatureMap::Mlp(Mlp::new(&dims, seed ^ MLP_INIT_SALT)?)
        }
    };
    let feat_dim = map.output_dim();

    let mut head;
    let mut imprint_store = None;
    match lcfg.kind {
        LearnerKind::FineTune | LearnerKind::Standard | LearnerKind::Lwf | LearnerKind::Ewc => {
            // Head (and backbone, when present) pretrain jointly with
            // softmax cross-entropy; episodic mode shapes the backbone
            // first, then fits the head on frozen features.
            head = Head::Linear(LinearHead::new(feat_dim));
            for &c in &pretrain_classes {
                head.admit_class(c)?;
            }
            if matches!(config.pretrain.mode, PretrainMode::Episodic { .. }) {
                pretrain_backbone(&mut map, config, &examples, &pretrain_classes, &mut rng)?;
                train_softmax_phase(
                    &mut map,
                    &mut head,
                    false,
                    &examples,
                    config.pretrain.epochs,
                    config.pretrain.batch_size,
                    config.pretrain.learning_rate.unwrap_or(0.1),
                    lcfg.momentum,
                    &mut rng,
                )?;
            } else {
                let joint = matches!(lcfg.backbone, BackboneConfig::Mlp { .. });
                let lr = config
                    .pretrain
                    .learning_rate
                    .unwrap_or(if joint { 0.01 } else { 0.1 });
                train_softmax_phase(
                    &mut map,
                    &mut head,
                    joint,
                    &examples,
                    config.pretrain.epochs,
                    config.pretrain.batch_size,
                    lr,
                    lcfg.momentum,
                    &mut rng,
                )?;
            }
        }
        LearnerKind::Ncm => {
            pretrain_backbone(&mut map, config, &examples, &pretrain_classes, &mut rng)?;
            let mut store = CentroidStore::new(feat_dim, lcfg.ncm_normalize);
            for &c in &pretrain_classes {
                store.admit(c)?;
            }
            for &(x, y) in &examples {
                store.update(y, &map.forward(x)?)?;
            }
            head = Head::Centroid {
                store,
                metric: lcfg.ncm_metric,
            };
        }
        LearnerKind::WeightImprint => {
            pretrain_backbone(&mut map, config, &examples, &pretrain_classes, &mut rng)?;
            let mut store = CentroidStore::new(feat_dim, false);
            let mut cosine = CosineHead::new(feat_dim, lcfg.temperature_s)?;
            for &c in &pretrain_classes {
                store.admit(c)?;
                cosine.admit(c)?;
            }
            for &(x, y) in &examples {
                store.update(y, &map.forward(x)?)?;
            }
            imprint_weights(&mut cosine, &store)?;
            imprint_store = Some(store);
            head = Head::Cosine(cosine);
        }
        LearnerKind::ExemplarTuning => {
            pretrain_backbone(&mut map, config, &examples, &pretrain_classes, &mut rng)?;
            let mut et = ExemplarTuningHead::new(feat_dim, lcfg.et_similarity);
            for &c in &pretrain_classes {
                et.admit(c)?;
            }
            for &(x, y) in &examples {
                et.update_centroid(y, &map.forward(x)?)?;
            }
            head = Head::Exemplar(et);
        }
    }

    let train_map = lcfg.trains_backbone();
    let regularizer = match lcfg.kind {
        LearnerKind::Lwf => Regularizer::Lwf {
            teacher_map: map.clone(),
            teacher_head: head.clone(),
            temperature: lcfg.lwf_temperature,
            weight: lcfg.lwf_weight,
        },
        LearnerKind::Ewc => {
            let anchor = Model::new(&mut map, &mut head, train_map).params();
            // Held-out slice of the pool reserved for Fisher estimation.
            let n_fisher = ((examples.len() as f64 * lcfg.ewc_fisher_fraction).ceil() as usize)
                .clamp(1, examples.len().max(1));
            let tail = &examples[examples.len() - n_fisher..];
            Regularizer::Ewc {
                state: EwcState::new(anchor, lcfg.ewc_lambda),
                fisher_features: tail.iter().map(|(x, _)| x.to_vec()).collect(),
                fisher_labels: tail.iter().map(|&(_, y)| y).collect(),
            }
        }
        _ => Regularizer::None,
    };

    Ok(Learner {
        map,
        head,
        train_map,
        sgd: SgdState::new(lcfg.resolved_learning_rate(), lcfg.momentum)?,
        batch_size: lcfg.batch_size,
        regularizer,
        imprint_store,
        warnings: Vec::new(),
    })
}

/// Runs one seed end to end (pretraining, streaming, metrics) without
/// touching the filesystem.
pub fn execute_run(
    config: &ExperimentConfig,
    dataset: &Dataset,
    task: &StreamTask,
    seed: u64,
) -> Result<RunProducts> {
    let strategy = config.resolve_strategy();
    let mut learner = pretrain_learner(config, dataset, seed)?;
    let cost_spec = CostSpec::of(&learner, config.ood);
    let outcome = run_stream(task, dataset, &mut learner, strategy, config.ood, seed)?;
    let mac_recomputed = recompute_total_macs(&outcome.log, &cost_spec, strategy);
    let report = metrics::report(
        &outcome.log,
        &task.buckets,
        outcome.meter.total(),
        config.rolling_window,
    )?;
    let summary = RunSummary {
        learner: config.learner.kind.slug().to_string(),
        seed,
        strategy,
        stream_len: outcome.log.len(),
        mac_total: outcome.meter.total(),
        mac_recomputed,
        metrics: report,
        warnings: outcome.warnings.clone(),
        data_fingerprint: config.data_fingerprint(),
    };
    Ok(RunProducts {
        task: task.clone(),
        log: outcome.log,
        summary,
        learner,
    })
}

/// Runs every seed in memory and returns the summaries (no files written).
pub fn run_experiment_in_memory(config: &ExperimentConfig) -> Result<Vec<RunSummary>> {
    config.validate()?;
    let dataset = build_dataset(config)?;
    let mut summaries = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let task = build_sequence(&dataset, &sequence_spec(config, &dataset, seed))?;
        summaries.push(execute_run(config, &dataset, &task, seed)?.summary);
    }
    Ok(summaries)
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn manifest_path(out: &Path, seed: u64) -> PathBuf {
    out.join("manifests").join(format!("seq_{seed}.json"))
}

/// Writes one stream-task manifest per seed. Idempotent: identical config
/// and seeds produce byte-identical files.
pub fn cmd_gen(config: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let dataset = build_dataset(config)?;
    ensure_dir(&out.join("manifests"))?;
    let mut paths = Vec::new();
    for &seed in &config.seeds {
        let task = build_sequence(&dataset, &sequence_spec(config, &dataset, seed))?;
        task.validate(&dataset, config.sequence.head_threshold)?;
        let path = manifest_path(out, seed);
        write_json(&task, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

fn load_or_build_task(
    config: &ExperimentConfig,
    dataset: &Dataset,
    out: &Path,
    seed: u64,
) -> Result<StreamTask> {
    let path = manifest_path(out, seed);
    if path.exists() {
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let task: StreamTask = serde_json::from_reader(BufReader::new(file))?;
        task.validate(dataset, config.sequence.head_threshold)?;
        Ok(task)
    } else {
        let task = build_sequence(dataset, &sequence_spec(config, dataset, seed))?;
        ensure_dir(&out.join("manifests"))?;
        write_json(&task, &path)?;
        Ok(task)
    }
}

fn persist_run(products: &RunProducts, out: &Path) -> Result<()> {
    let slug = &products.summary.learner;
    let seed = products.summary.seed;
    ensure_dir(&out.join("logs"))?;
    ensure_dir(&out.join("reports"))?;
    ensure_dir(&out.join("checkpoints"))?;

    let log_path = out.join("logs").join(format!("{slug}_seed{seed}.ndjson"));
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    crate::harness::write_ndjson(&products.log, std::io::BufWriter::new(file))?;

    write_json(
        &products.summary,
        &out.join("reports")
            .join(format!("run_{slug}_seed{seed}.json")),
    )?;
    write_json(
        &products.learner,
        &out.join("checkpoints")
            .join(format!("{slug}_seed{seed}.json")),
    )?;

    let rolling_path = out
        .join("reports")
        .join(format!("rolling_{slug}_seed{seed}.csv"));
    let mut rolling = String::from("step,accuracy\n");
    for (step, acc) in &products.summary.metrics.rolling {
        rolling.push_str(&format!("{step},{acc}\n"));
    }
    fs::write(&rolling_path, rolling).map_err(|e| Error::io(&rolling_path, e))?;

    let scores: Vec<f64> = products.log.iter().map(|r| r.ood_score).collect();
    let labels: Vec<bool> = products.log.iter().map(|r| r.unseen).collect();
    if let Ok(points) = roc_points(&scores, &labels) {
        let roc_path = out
            .join("reports")
            .join(format!("roc_{slug}_seed{seed}.csv"));
        let mut text = String::from("fpr,tpr,threshold\n");
        for p in points {
            text.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
        }
        fs::write(&roc_path, text).map_err(|e| Error::io(&roc_path, e))?;
    }
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and population standard deviation of each headline metric across
/// seeds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AggregateReport {
    pub learner: String,
    pub seeds: Vec<u64>,
    pub overall_accuracy: (f64, f64),
    pub mean_per_class: (f64, f64),
    pub unseen_auroc: Option<(f64, f64)>,
    pub total_gmacs: (f64, f64),
}

pub fn aggregate(summaries: &[RunSummary]) -> Result<AggregateReport> {
    if summaries.is_empty() {
        return Err(Error::EmptyInput("no run summaries to aggregate"));
    }
    let learner = summaries[0].learner.clone();
    let overall: Vec<f64> = summaries
        .iter()
        .map(|s| s.metrics.overall_accuracy)
        .collect();
    let mpc: Vec<f64> = summaries.iter().map(|s| s.metrics.mean_per_class).collect();
    let gmacs: Vec<f64> = summaries.iter().map(|s| s.metrics.total_gmacs).collect();
    let aurocs: Vec<f64> = summaries
        .iter()
        .filter_map(|s| s.metrics.unseen_auroc)
        .collect();
    Ok(AggregateReport {
        learner,
        seeds: summaries.iter().map(|s| s.seed).collect(),
        overall_accuracy: mean_std(&overall),
        mean_per_class: mean_std(&mpc),
        unseen_auroc: if aurocs.len() == summaries.len() {
            Some(mean_std(&aurocs))
        } else {
            None
        },
        total_gmacs: mean_std(&gmacs),
    })
}

/// Executes the configured experiment: pretraining + streaming per seed
/// (concurrently up to `jobs`), persisting logs, summaries, plot CSVs, and
/// checkpoints under `out`.
pub fn cmd_run(
    config: &ExperimentConfig,
    out: &Path,
    jobs: usize,
    seed_override: Option<u64>,
) -> Result<Vec<RunSummary>> {
    config.validate()?;
    let seeds: Vec<u64> = match seed_override {
        Some(seed) => vec![seed],
        None => config.seeds.clone(),
    };
    let dataset = build_dataset(config)?;

    // Tasks are created (or replayed from disk) up front; runs then execute
    // with fully isolated learner state.
    let mut tasks = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        tasks.push(load_or_build_task(config, &dataset, out, seed)?);
    }

    let results: Mutex<Vec<(usize, Result<RunProducts>)>> = Mutex::new(Vec::new());
    let jobs = jobs.max(1);
    for batch in seeds
        .iter()
        .zip(&tasks)
        .enumerate()
        .collect::<Vec<_>>()
        .chunks(jobs)
    {
        std::thread::scope(|scope| {
            for &(i, (&seed, task)) in batch {
                let dataset = &dataset;
                let results = &results;
                scope.spawn(move || {
                    let product = execute_run(config, dataset, task, seed);
                    results.lock().unwrap().push((i, product));
                });
            }
        });
    }
    let mut indexed = results.into_inner().unwrap();
    indexed.sort_by_key(|(i, _)| *i);

    let mut summaries = Vec::with_capacity(indexed.len());
    for (_, product) in indexed {
        let product = product?;
        persist_run(&product, out)?;
        summaries.push(product.summary);
    }

    let slug = config.learner.kind.slug();
    let agg = aggregate(&summaries)?;
    write_json(
        &agg,
        &out.join("reports").join(format!("aggregate_{slug}.json")),
    )?;
    Ok(summaries)
}

/// Paths produced by [`cmd_report`].
#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub comparison: PathBuf,
    pub accuracy_vs_macs: PathBuf,
}

pub const COMPARISON_HEADER: &str =
    "learner,novel_head,pretrain_head,novel_tail,pretrain_tail,mean_per_class,overall,gmacs";
pub const ACCURACY_VS_MACS_HEADER: &str =
    "learner,interval_samples,epochs,seed,overall_accuracy,total_gmacs";

fn load_summaries(run_dirs: &[PathBuf]) -> Result<Vec<RunSummary>> {
    let mut summaries: Vec<RunSummary> = Vec::new();
    for dir in run_dirs {
        let reports = dir.join("reports");
        let entries = fs::read_dir(&reports).map_err(|e| Error::io(&reports, e))?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("run_") && n.ends_with(".json"))
            })
            .collect();
        files.sort();
        for path in files {
            let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            summaries.push(serde_json::from_reader(BufReader::new(file))?);
        }
    }
    if summaries.is_empty() {
        return Err(Error::EmptyInput("no run summaries found"));
    }
    let fingerprint = &summaries[0].data_fingerprint;
    if let Some(other) = summaries
        .iter()
        .find(|s| &s.data_fingerprint != fingerprint)
    {
        return Err(Error::RunMismatch(format!(
            "runs '{}' and '{}' used different data configurations",
            summaries[0].learner, other.learner
        )));
    }
    Ok(summaries)
}

fn strategy_shape(strategy: &UpdateStrategy) -> (usize, usize) {
    match *strategy {
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
        UpdateStrategy::InstancePerSample => (0, 0),
    }
}

/// Builds the cross-learner comparison table and the accuracy-versus-compute
/// sweep CSV from completed run directories.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<ReportPaths> {
    let summaries = load_summaries(run_dirs)?;
    ensure_dir(out)?;

    // One row per learner: bucket accuracies, mean per-class, overall, and
    // GMACs, averaged across that learner's runs.
    let mut by_learner: BTreeMap<String, Vec<&RunSummary>> = BTreeMap::new();
    for s in &summaries {
        by_learner.entry(s.learner.clone()).or_default().push(s);
    }
    let mut table = String::from(COMPARISON_HEADER);
    table.push('\n');
    for (learner, runs) in &by_learner {
        use crate::sequence::Bucket::*;
        let bucket_mean = |bucket| {
            let vals: Vec<f64> = runs
                .iter()
                .filter_map(|s| s.metrics.bucket_accuracies.get(&bucket).copied())
                .collect();
            if vals.is_empty() {
                String::new()
            } else {
                mean_std(&vals).0.to_string()
            }
        };
        let overall = mean_std(
            &runs
                .iter()
                .map(|s| s.metrics.overall_accuracy)
                .collect::<Vec<_>>(),
        )
        .0;
        let mpc = mean_std(
            &runs
                .iter()
                .map(|s| s.metrics.mean_per_class)
                .collect::<Vec<_>>(),
        )
        .0;
        let gmacs = mean_std(
            &runs
                .iter()
                .map(|s| s.metrics.total_gmacs)
                .collect::<Vec<_>>(),
        )
        .0;
        table.push_str(&format!(
            "{learner},{},{},{},{},{mpc},{overall},{gmacs}\n",
            bucket_mean(NovelHead),
            bucket_mean(PretrainHead),
            bucket_mean(NovelTail),
            bucket_mean(PretrainTail),
        ));
    }
    let comparison = out.join("comparison.csv");
    fs::write(&comparison, table).map_err(|e| Error::io(&comparison, e))?;

    // One row per run: the accuracy/compute trade-off across update
    // strategies.
    let mut sweep = String::from(ACCURACY_VS_MACS_HEADER);
    sweep.push('\n');
    for s in &summaries {
        let (interval, epochs) = strategy_shape(&s.strategy);
        sweep.push_str(&format!(
            "{},{interval},{epochs},{},{},{}\n",
            s.learner, s.seed, s.metrics.overall_accuracy, s.metrics.total_gmacs
        ));
    }
    let accuracy_vs_macs = out.join("accuracy_vs_macs.csv");
    fs::write(&accuracy_vs_macs, sweep).map_err(|e| Error::io(&accuracy_vs_macs, e))?;

    Ok(ReportPaths {
        comparison,
        accuracy_vs_macs,
    })
}
