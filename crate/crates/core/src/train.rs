//! Balanced label splits, supervised training, fine-tuning of pretrained
//! encoders, and distillation of a fine-tuned teacher into a student.
//!
//! All loops share one shape: shuffle by a seeded per-epoch stream, walk
//! mini-batches (the last one may be short), take one optimizer step per
//! batch, round parameters to storage precision, and log the mean loss.

use std::collections::HashMap;

use rand::seq::SliceRandom;

use crate::autodiff::{
    AutodiffError, Graph, GraphBuilder, NodeId, NormBatchStats, Optimizer, OptimizerConfig, ParamMap, Tensor,
};
use crate::contrastive::{loss_log_csv, EpochRecord, DEFAULT_LR};
use crate::model::{
    count_parameters, Checkpoint, EncoderConfig, GraphOptions, Head, ModelError, Network, Provenance, Stage,
    DEFAULT_PROJ_DIM, NUM_CLASSES,
};
use crate::raster::{BandStats, DatasetManifest, Label, MultispectralChip, RasterError, Split};
use crate::rng::{derive_seed, stream};

pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.03;
/// The label-budget ladder studied by the experiments.
pub const SPLIT_FRACTIONS: [f64; 6] = [0.01, 0.03, 0.10, 0.25, 0.50, 1.00];
pub const DEFAULT_TRAIN_EPOCHS: usize = 50;
pub const DEFAULT_TRAIN_BATCH: usize = 32;
pub const DEFAULT_DISTILL_TEMPERATURE: f64 = 2.0;
/// Batch size for inference-only passes.
pub const INFERENCE_BATCH: usize = 64;

/// Graph input carrying one-hot targets.
pub const TARGET_NAME: &str = "y";
/// Graph input carrying softened teacher probabilities.
pub const SOFT_TARGET_NAME: &str = "soft_targets";
/// Graph input carrying `Σ p log p` of the soft targets over the batch.
pub const SOFT_PLOGP_NAME: &str = "soft_plogp";
const EMBEDDING_NAME: &str = "emb";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("class {label:?} has {count} labeled records; at least 2 are required")]
    InsufficientClassRecords { label: Label, count: usize },
    #[error("fraction {0} is outside (0, 1]")]
    InvalidFraction(f64),
    #[error("training split is empty")]
    EmptySplit,
    #[error("unlabeled pool is empty")]
    EmptyPool,
    #[error("{stage} loss became non-finite at epoch {epoch}: {detail}")]
    DivergedLoss { stage: &'static str, epoch: usize, detail: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// `x` rounded down to a non-negative even integer.
pub fn floor_even(x: f64) -> usize {
    let n = x.max(0.0).floor() as usize;
    n - n % 2
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub irrigated: usize,
    pub not_irrigated: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.irrigated + self.not_irrigated
    }
}

/// A balanced training split and a balanced holdout, as indices into the
/// labeled manifest's entries.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    pub fraction: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
    /// Labeled records the fractions refer to.
    pub labeled_pool: usize,
    /// Ascending entry indices.
    pub train: Vec<usize>,
    /// Ascending entry indices, disjoint from `train`.
    pub holdout: Vec<usize>,
    pub train_counts: ClassCounts,
    pub holdout_counts: ClassCounts,
}

impl SplitPlan {
    pub fn size(&self) -> usize {
        self.train.len()
    }

    fn subset(manifest: &DatasetManifest, indices: &[usize], split: Split) -> DatasetManifest {
        let entries = indices
            .iter()
            .map(|&i| {
                let mut e = manifest.entries[i].clone();
                e.split = Some(split);
                e
            })
            .collect();
        DatasetManifest { entries }
    }

    pub fn train_manifest(&self, manifest: &DatasetManifest) -> DatasetManifest {
        Self::subset(manifest, &self.train, Split::Train)
    }

    pub fn holdout_manifest(&self, manifest: &DatasetManifest) -> DatasetManifest {
        Self::subset(manifest, &self.holdout, Split::Holdout)
    }

    /// Training records followed by holdout records, split column filled.
    pub fn split_manifest(&self, manifest: &DatasetManifest) -> DatasetManifest {
        let mut out = self.train_manifest(manifest);
        out.entries.extend(self.holdout_manifest(manifest).entries);
        out
    }
}

/// [`make_splits_with_holdout`] with the default 3% holdout.
pub fn make_splits(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<SplitPlan, TrainError> {
    make_splits_with_holdout(manifest, fraction, DEFAULT_HOLDOUT_FRACTION, seed)
}

/// Draws a balanced holdout first, then a balanced training split of
/// `floor_even(fraction · labeled)` records from what remains.
///
/// Each class is shuffled once by `seed`; the holdout takes the head of
/// every class order and training splits take the following prefix, so a
/// smaller fraction is always a subset of a larger one and the holdout never
/// depends on the fraction. The holdout keeps at least one record per class.
/// When a class cannot supply its half of the requested size, the split is
/// capped at what the smaller class can still provide.
pub fn make_splits_with_holdout(
    manifest: &DatasetManifest,
    fraction: f64,
    holdout_fraction: f64,
    seed: u64,
) -> Result<SplitPlan, TrainError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TrainError::InvalidFraction(fraction));
    }
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(TrainError::InvalidFraction(holdout_fraction));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, e) in manifest.entries.iter().enumerate() {
        if let Some(label) = e.label {
            by_class[label.class_index()].push(i);
        }
    }
    for label in [Label::Irrigated, Label::NotIrrigated] {
        let count = by_class[label.class_index()].len();
        if count < 2 {
            return Err(TrainError::InsufficientClassRecords { label, count });
        }
    }
    for (class, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut stream(seed, "split/order", &[class as u64]));
    }
    let labeled = by_class[0].len() + by_class[1].len();
    let smallest = by_class[0].len().min(by_class[1].len());
    let holdout_half = (floor_even(holdout_fraction * labeled as f64) / 2).clamp(1, smallest - 1);
    let train_half = (floor_even(fraction * labeled as f64) / 2).min(smallest - holdout_half);
    if train_half == 0 {
        return Err(TrainError::EmptySplit);
    }
    let mut holdout: Vec<usize> = by_class.iter().flat_map(|m| m[..holdout_half].iter().copied()).collect();
    let mut train: Vec<usize> =
        by_class.iter().flat_map(|m| m[holdout_half..holdout_half + train_half].iter().copied()).collect();
    holdout.sort_unstable();
    train.sort_unstable();
    let counts = |half| ClassCounts { irrigated: half, not_irrigated: half };
    Ok(SplitPlan {
        fraction,
        holdout_fraction,
        seed,
        labeled_pool: labeled,
        train,
        holdout,
        train_counts: counts(train_half),
        holdout_counts: counts(holdout_half),
    })
}

/// A chip with its ground-truth class.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledChip {
    pub chip: MultispectralChip,
    pub label: Label,
}

/// Mini-batch schedule shared by the supervised, fine-tuning and
/// distillation loops.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_TRAIN_EPOCHS,
            batch_size: DEFAULT_TRAIN_BATCH,
            optimizer: OptimizerConfig::Adam { lr: DEFAULT_LR },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.optimizer.base_lr() >= 0.0 && self.optimizer.base_lr().is_finite()) {
            return Err(TrainError::InvalidConfig("learning rate must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    /// Keep every encoder tensor (and its running statistics) fixed and
    /// train only the classifier.
    pub freeze_encoder: bool,
    /// When set, the checkpoint's encoder must match it exactly.
    pub expected_encoder: Option<EncoderConfig>,
    pub train: TrainConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { freeze_encoder: true, expected_encoder: None, train: TrainConfig::default() }
    }
}

/// Where a supervised run starts.
#[derive(Clone, Debug)]
pub enum Init {
    Scratch,
    WarmStart(Checkpoint),
}

#[derive(Clone, Debug, PartialEq)]
pub enum StudentSpec {
    /// Same architecture as the teacher, freshly initialized.
    SameAsTeacher,
    /// A different architecture with no more parameters than the teacher.
    Smaller(EncoderConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub temperature: f64,
    pub student: StudentSpec,
    pub train: TrainConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_DISTILL_TEMPERATURE,
            student: StudentSpec::SameAsTeacher,
            train: TrainConfig::default(),
        }
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Loss log in the training format `epoch,loss,lr`.
pub fn train_log_csv(records: &[EpochRecord]) -> String {
    loss_log_csv("epoch,loss,lr", records)
}

/// One-hot class targets, shape `(n, 2)`.
pub fn one_hot(labels: &[Label]) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), NUM_CLASSES]);
    for (i, l) in labels.iter().enumerate() {
        t.data_mut()[i * NUM_CLASSES + l.class_index()] = 1.0;
    }
    t
}

/// Appends mean cross-entropy of `logits` against the one-hot input
/// [`TARGET_NAME`].
pub fn cross_entropy_graph(g: &mut GraphBuilder, logits: NodeId) -> Result<NodeId, AutodiffError> {
    let shape = g.shape(logits).to_vec();
    let y = g.input(TARGET_NAME, &shape)?;
    let log_p = g.log_softmax(logits)?;
    let picked = g.mul(log_p, y)?;
    let total = g.sum(picked)?;
    g.scalar_mul(total, -1.0 / shape[0] as f64)
}

/// Row-wise `softmax(logits / T)`.
pub fn soften(logits: &Tensor, temperature: f64) -> Tensor {
    let width = *logits.shape().last().expect("logits have a class axis");
    let mut data = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(width) {
        let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / total));
    }
    Tensor::new(logits.shape().to_vec(), data).expect("same shape")
}

/// `Σ p log p` over all entries, with `0 log 0 = 0`.
fn plogp(probs: &Tensor) -> f64 {
    probs.data().iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum()
}

/// Appends `T² · mean_rows KL(soft targets ‖ softmax(logits / T))`, reading
/// the targets from [`SOFT_TARGET_NAME`] and their `Σ p log p` from
/// [`SOFT_PLOGP_NAME`].
pub fn distill_loss_graph(
    g: &mut GraphBuilder,
    student_logits: NodeId,
    temperature: f64,
) -> Result<NodeId, TrainError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(TrainError::InvalidConfig(format!("distillation temperature {temperature}")));
    }
    let shape = g.shape(student_logits).to_vec();
    let soft = g.input(SOFT_TARGET_NAME, &shape)?;
    let entropy = g.input(SOFT_PLOGP_NAME, &[])?;
    let scaled = g.scalar_mul(student_logits, 1.0 / temperature)?;
    let log_q = g.log_softmax(scaled)?;
    let cross = g.mul(log_q, soft)?;
    let cross = g.sum(cross)?;
    let kl = g.sub(entropy, cross)?;
    Ok(g.scalar_mul(kl, temperature * temperature / shape[0] as f64)?)
}

/// Distillation loss between two logit batches, evaluated through the
/// same graph the training loop uses.
pub fn distillation_loss(
    teacher_logits: &Tensor,
    student_logits: &Tensor,
    temperature: f64,
) -> Result<f64, TrainError> {
    if teacher_logits.shape() != student_logits.shape() || teacher_logits.rank() != 2 {
        return Err(AutodiffError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            teacher_logits.shape(),
            student_logits.shape()
        ))
        .into());
    }
    let mut g = GraphBuilder::new();
    let z = g.input("z", student_logits.shape())?;
    let loss = distill_loss_graph(&mut g, z, temperature)?;
    let graph = g.build();
    let soft = soften(teacher_logits, temperature);
    let entropy = Tensor::scalar(plogp(&soft));
    let bindings =
        [("z", student_logits), (SOFT_TARGET_NAME, &soft), (SOFT_PLOGP_NAME, &entropy)].into_iter().collect();
    Ok(graph.evaluate(&bindings)?.get(loss).item())
}

/// Loss and parameter gradients of one distillation step. `training`
/// selects batch statistics (as in the training loop) or running statistics.
pub fn distillation_gradients(
    student: &Network,
    x: &Tensor,
    teacher_logits: &Tensor,
    temperature: f64,
    training: bool,
) -> Result<(f64, ParamMap), TrainError> {
    let opts = GraphOptions { head: Head::Classifier, training, freeze_encoder: false };
    let step = distill_graph(student, x.shape()[0], opts, temperature)?;
    let soft = soften(teacher_logits, temperature);
    let entropy = Tensor::scalar(plogp(&soft));
    let mut bindings = student.bindings(x);
    bindings.insert(SOFT_TARGET_NAME, &soft);
    bindings.insert(SOFT_PLOGP_NAME, &entropy);
    let out = step.graph.gradients(step.loss, &bindings)?;
    Ok((out.values.get(step.loss).item(), out.grads))
}

struct StepGraph {
    graph: Graph,
    loss: NodeId,
}

fn classifier_graph(net: &Network, batch: usize, opts: GraphOptions) -> Result<StepGraph, TrainError> {
    let mut g = GraphBuilder::new();
    let nodes = net.build_into(&mut g, batch, opts)?;
    let loss = cross_entropy_graph(&mut g, nodes.logits.expect("classifier head"))?;
    Ok(StepGraph { graph: g.build(), loss })
}

fn head_graph(embedding_dim: usize, batch: usize) -> Result<StepGraph, TrainError> {
    let mut g = GraphBuilder::new();
    let emb = g.input(EMBEDDING_NAME, &[batch, embedding_dim])?;
    let w = g.param("cls.w", &[embedding_dim, NUM_CLASSES])?;
    let b = g.param("cls.b", &[NUM_CLASSES])?;
    let logits = g.matmul(emb, w)?;
    let logits = g.add(logits, b)?;
    let loss = cross_entropy_graph(&mut g, logits)?;
    Ok(StepGraph { graph: g.build(), loss })
}

fn distill_graph(net: &Network, batch: usize, opts: GraphOptions, temperature: f64) -> Result<StepGraph, TrainError> {
    let mut g = GraphBuilder::new();
    let nodes = net.build_into(&mut g, batch, opts)?;
    let loss = distill_loss_graph(&mut g, nodes.logits.expect("classifier head"), temperature)?;
    Ok(StepGraph { graph: g.build(), loss })
}

/// Graphs keyed by batch size; a short final batch gets its own.
struct GraphCache<F> {
    graphs: HashMap<usize, StepGraph>,
    build: F,
}

impl<F: Fn(usize) -> Result<StepGraph, TrainError>> GraphCache<F> {
    fn new(build: F) -> Self {
        Self { graphs: HashMap::new(), build }
    }

    fn get(&mut self, batch: usize) -> Result<&StepGraph, TrainError> {
        if !self.graphs.contains_key(&batch) {
            let graph = (self.build)(batch)?;
            self.graphs.insert(batch, graph);
        }
        Ok(&self.graphs[&batch])
    }
}

/// Result of one forward/backward pass over a batch.
struct StepResult {
    loss: f64,
    grads: ParamMap,
    norm_stats: Vec<NormBatchStats>,
}

fn diverged(stage: Stage, epoch: usize, e: TrainError) -> TrainError {
    match e {
        TrainError::Autodiff(AutodiffError::NonFiniteResult(d) | AutodiffError::NonFiniteGradient(d)) => {
            TrainError::DivergedLoss { stage: stage.name(), epoch, detail: d }
        }
        other => other,
    }
}

/// The shared epoch/batch loop.
fn run_epochs(
    stage: Stage,
    net: &mut Network,
    n: usize,
    config: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
    step: &mut dyn FnMut(&Network, &[usize]) -> Result<StepResult, TrainError>,
) -> Result<Vec<EpochRecord>, TrainError> {
    let batch = config.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let mut optimizer = Optimizer::new(config.optimizer, (steps_per_epoch * config.epochs) as u64);
    let label = format!("{}/shuffle", stage.name());
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(config.seed, &label, &[epoch as u64]));
        let (mut total, mut lr) = (0.0, 0.0);
        for idx in order.chunks(batch) {
            let out = step(net, idx).map_err(|e| diverged(stage, epoch + 1, e))?;
            lr = optimizer.step(net.params_mut(), &out.grads)?;
            net.round_to_storage();
            net.update_running_stats(&out.norm_stats);
            total += out.loss * idx.len() as f64;
        }
        let record = EpochRecord { epoch: epoch + 1, loss: total / n as f64, lr };
        if !record.loss.is_finite() {
            return Err(TrainError::DivergedLoss { stage: stage.name(), epoch: epoch + 1, detail: "mean loss".into() });
        }
        progress(&record);
        log.push(record);
    }
    Ok(log)
}

/// Standardized inputs for the chips at `idx`.
fn gather(net: &Network, chips: &[&MultispectralChip], idx: &[usize]) -> Result<Tensor, TrainError> {
    let batch: Vec<&MultispectralChip> = idx.iter().map(|&i| chips[i]).collect();
    Ok(net.input_batch(&batch)?)
}

fn gather_labels(labels: &[Label], idx: &[usize]) -> Tensor {
    one_hot(&idx.iter().map(|&i| labels[i]).collect::<Vec<_>>())
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let width = t.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
    }
    Tensor::new(vec![idx.len(), width], data).expect("consistent rows")
}

/// Applies `f` to consecutive inference-sized batches and stacks the rows.
fn batched_rows(
    net: &Network,
    chips: &[&MultispectralChip],
    f: impl Fn(&Network, &Tensor) -> Result<Tensor, ModelError>,
) -> Result<Tensor, ModelError> {
    let mut data = Vec::new();
    let mut width = 0;
    for batch in chips.chunks(INFERENCE_BATCH) {
        let out = f(net, &net.input_batch(batch)?)?;
        width = out.shape()[1];
        data.extend_from_slice(out.data());
    }
    Ok(Tensor::new(vec![chips.len(), width], data)?)
}

/// Inference-mode encoder embeddings for every chip.
pub fn embed_chips(net: &Network, chips: &[&MultispectralChip]) -> Result<Tensor, ModelError> {
    batched_rows(net, chips, Network::embed)
}

/// Inference-mode classifier logits for every chip.
pub fn logits_of(net: &Network, chips: &[&MultispectralChip]) -> Result<Tensor, ModelError> {
    batched_rows(net, chips, Network::logits)
}

/// Inference-mode irrigated-class probability for every chip.
pub fn irrigated_probabilities(net: &Network, chips: &[&MultispectralChip]) -> Result<Vec<f64>, ModelError> {
    let probs = batched_rows(net, chips, |n, x| n.forward(x, Head::Classifier))?;
    Ok(probs.rows().map(|r| r[Label::Irrigated.class_index()]).collect())
}

fn full_step(
    graphs: &mut GraphCache<impl Fn(usize) -> Result<StepGraph, TrainError>>,
    net: &Network,
    x: &Tensor,
    extra: &[(&'static str, &Tensor)],
) -> Result<StepResult, TrainError> {
    let step = graphs.get(x.shape()[0])?;
    let mut bindings = net.bindings(x);
    bindings.extend(extra.iter().copied());
    let out = step.graph.gradients(step.loss, &bindings)?;
    Ok(StepResult {
        loss: out.values.get(step.loss).item(),
        norm_stats: out.values.norm_batch_stats(),
        grads: out.grads,
    })
}

/// Cross-entropy training of a whole network on `train`.
fn train_classifier(
    stage: Stage,
    net: &mut Network,
    train: &[LabeledChip],
    config: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>, TrainError> {
    let chips: Vec<&MultispectralChip> = train.iter().map(|s| &s.chip).collect();
    let labels: Vec<Label> = train.iter().map(|s| s.label).collect();
    let template = net.clone();
    let mut graphs = GraphCache::new(|b| classifier_graph(&template, b, GraphOptions::training(Head::Classifier)));
    run_epochs(stage, net, train.len(), config, progress, &mut |net, idx| {
        let x = gather(net, &chips, idx)?;
        let y = gather_labels(&labels, idx);
        full_step(&mut graphs, net, &x, &[(TARGET_NAME, &y)])
    })
}

/// Trains encoder and classifier end-to-end with cross-entropy, from fresh
/// weights or from a checkpoint's weights.
pub fn train_supervised(
    train: &[LabeledChip],
    stats: &BandStats,
    encoder: &EncoderConfig,
    init: &Init,
    config: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let (mut net, source) = match init {
        Init::Scratch => {
            (Network::new(encoder.clone(), DEFAULT_PROJ_DIM, derive_seed(config.seed, "supervised/init", &[]))?, None)
        }
        Init::WarmStart(ckpt) => {
            ckpt.require_config(encoder)?;
            (ckpt.network().clone(), Some(ckpt.id()))
        }
    };
    net.set_input_stats(stats, train[0].chip.bands())?;
    let log = train_classifier(Stage::Supervised, &mut net, train, config, progress)?;
    let provenance =
        Provenance { lineage: vec![Stage::Supervised], seed: config.seed, epoch: config.epochs as u64, source };
    Ok(TrainOutcome { checkpoint: Checkpoint::with_provenance(&net, provenance)?, log })
}

/// Trains a fresh classifier on top of a pretrained encoder. The projection
/// head is carried along untouched and unused.
pub fn finetune(
    pretrained: &Checkpoint,
    train: &[LabeledChip],
    config: &FinetuneConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    config.train.validate()?;
    pretrained.require_stage(&[Stage::Pretrain])?;
    if let Some(expected) = &config.expected_encoder {
        pretrained.require_config(expected)?;
    }
    if train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let mut net = pretrained.network().clone();
    net.reset_classifier(derive_seed(config.train.seed, "finetune/init", &[]));
    net.round_to_storage();
    let log = if config.freeze_encoder {
        // The encoder is fixed and runs in inference mode, so embeddings are
        // computed once and only the linear classifier is optimized.
        let chips: Vec<&MultispectralChip> = train.iter().map(|s| &s.chip).collect();
        let labels: Vec<Label> = train.iter().map(|s| s.label).collect();
        let emb = embed_chips(&net, &chips)?;
        let dim = net.config().embedding_dim;
        let mut graphs = GraphCache::new(|b| head_graph(dim, b));
        run_epochs(Stage::Finetune, &mut net, train.len(), &config.train, progress, &mut |net, idx| {
            let e = gather_rows(&emb, idx);
            let y = gather_labels(&labels, idx);
            let step = graphs.get(idx.len())?;
            let params = net.params();
            let bindings =
                [(EMBEDDING_NAME, &e), (TARGET_NAME, &y), ("cls.w", &params["cls.w"]), ("cls.b", &params["cls.b"])]
                    .into_iter()
                    .collect();
            let out = step.graph.gradients(step.loss, &bindings)?;
            Ok(StepResult { loss: out.values.get(step.loss).item(), grads: out.grads, norm_stats: Vec::new() })
        })?
    } else {
        train_classifier(Stage::Finetune, &mut net, train, &config.train, progress)?
    };
    let checkpoint = pretrained.derive(&net, Stage::Finetune, config.train.seed, config.train.epochs as u64)?;
    Ok(TrainOutcome { checkpoint, log })
}

/// Trains a student on the teacher's softened predictions over an
/// unlabeled pool. Teacher outputs are computed once in inference mode.
pub fn distill(
    teacher: &Checkpoint,
    pool: &[MultispectralChip],
    config: &DistillConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    config.train.validate()?;
    teacher.require_stage(&[Stage::Finetune])?;
    if pool.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    let teacher_net = teacher.network();
    let student_config = match &config.student {
        StudentSpec::SameAsTeacher => teacher_net.config().clone(),
        StudentSpec::Smaller(c) => c.clone(),
    };
    let mut student =
        Network::new(student_config, teacher_net.proj_dim(), derive_seed(config.train.seed, "distill/init", &[]))?;
    student.copy_input_stats(teacher_net)?;
    let (t_count, s_count) = (count_parameters(teacher_net).total, count_parameters(&student).total);
    if s_count > t_count {
        return Err(TrainError::InvalidConfig(format!("student has {s_count} parameters, teacher {t_count}")));
    }
    let chips: Vec<&MultispectralChip> = pool.iter().collect();
    let soft = soften(&logits_of(teacher_net, &chips)?, config.temperature);
    let template = student.clone();
    let opts = GraphOptions::training(Head::Classifier);
    let mut graphs = GraphCache::new(|b| distill_graph(&template, b, opts, config.temperature));
    let log = run_epochs(Stage::Distill, &mut student, pool.len(), &config.train, progress, &mut |net, idx| {
        let x = gather(net, &chips, idx)?;
        let targets = gather_rows(&soft, idx);
        let entropy = Tensor::scalar(plogp(&targets));
        full_step(&mut graphs, net, &x, &[(SOFT_TARGET_NAME, &targets), (SOFT_PLOGP_NAME, &entropy)])
    })?;
    let checkpoint = teacher.derive(&student, Stage::Distill, config.train.seed, config.train.epochs as u64)?;
    Ok(TrainOutcome { checkpoint, log })
}
