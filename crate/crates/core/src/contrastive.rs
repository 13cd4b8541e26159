//! NT-Xent loss and the self-supervised pretraining loop.
//!
//! Batches interleave the two views of each source image: rows `2i` and
//! `2i + 1` are the positive pair for image `i`.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::augment::{apply_augmentation, sample_augmentation_pair, AugmentError, AugmentationRng};
use crate::autodiff::{AutodiffError, Graph, GraphBuilder, NodeId, Optimizer, OptimizerConfig, Tensor};
use crate::model::{Checkpoint, EncoderConfig, GraphOptions, Head, ModelError, Network, Stage};
use crate::raster::{BandStats, MultispectralChip};
use crate::rng::{derive_seed, stream};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_EPOCHS: usize = 50;
pub const DEFAULT_LR: f64 = 5e-4;
/// Tolerance on the unit-norm precondition of [`nt_xent_loss`].
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum ContrastiveError {
    #[error("contrastive batch has {0} rows; views must come in pairs")]
    OddRowCount(usize),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("contrastive batch needs at least two source images, got {0}")]
    BatchTooSmall(usize),
    #[error("row {row} has norm {norm}; embeddings must be unit-norm")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("the unlabeled pool is empty or smaller than two chips")]
    EmptyPool,
    #[error("loss became non-finite at epoch {epoch}: {detail}")]
    DivergedLoss { epoch: usize, detail: String },
    #[error("invalid contrastive config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            optimizer: OptimizerConfig::Adam { lr: DEFAULT_LR },
            seed: 0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), ContrastiveError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ContrastiveError::NonPositiveTemperature(self.temperature));
        }
        if self.batch_size < 2 {
            return Err(ContrastiveError::InvalidConfig(format!("batch_size {} < 2", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(ContrastiveError::InvalidConfig("epochs must be positive".into()));
        }
        if !(self.optimizer.base_lr() >= 0.0) {
            return Err(ContrastiveError::InvalidConfig("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// Nodes added by [`nt_xent_graph`].
#[derive(Clone, Copy, Debug)]
pub struct NtXentNodes {
    /// Scalar mean over all `2N` ordered positive pairs.
    pub loss: NodeId,
    /// `(2N, 1)`: the term of each row against its partner.
    pub per_pair: NodeId,
}

/// Appends NT-Xent over the `(2N, d)` unit-norm rows of `z` to `g`.
pub fn nt_xent_graph(g: &mut GraphBuilder, z: NodeId, temperature: f64) -> Result<NtXentNodes, ContrastiveError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(ContrastiveError::NonPositiveTemperature(temperature));
    }
    let rows = g.shape(z)[0];
    if rows % 2 != 0 {
        return Err(ContrastiveError::OddRowCount(rows));
    }
    if rows < 4 {
        return Err(ContrastiveError::BatchTooSmall(rows / 2));
    }
    let mut not_self = Tensor::full(&[rows, rows], 1.0);
    let mut partner = Tensor::zeros(&[rows, rows]);
    for i in 0..rows {
        not_self.data_mut()[i * rows + i] = 0.0;
        partner.data_mut()[i * rows + (i ^ 1)] = 1.0;
    }
    let not_self = g.constant(not_self);
    let partner = g.constant(partner);
    let ones = g.constant(Tensor::full(&[rows, 1], 1.0));
    let sim = g.matmul_nt(z, z)?;
    let logits = g.scalar_mul(sim, 1.0 / temperature)?;
    let e = g.exp(logits)?;
    let masked = g.mul(e, not_self)?;
    let denom = g.matmul(masked, ones)?;
    let log_denom = g.log(denom)?;
    let pos = g.mul(logits, partner)?;
    let pos = g.matmul(pos, ones)?;
    let per_pair = g.sub(log_denom, pos)?;
    let loss = g.mean(per_pair)?;
    Ok(NtXentNodes { loss, per_pair })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NtXent {
    pub loss: f64,
    /// One term per row, in row order.
    pub per_pair: Vec<f64>,
}

/// NT-Xent over a `(2N, d)` batch of unit-norm embeddings.
pub fn nt_xent_loss(batch: &Tensor, temperature: f64) -> Result<NtXent, ContrastiveError> {
    if batch.rank() != 2 {
        return Err(
            AutodiffError::ShapeMismatch(format!("contrastive batch must be rank 2, got {:?}", batch.shape())).into()
        );
    }
    for (row, r) in batch.rows().enumerate() {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(ContrastiveError::NotUnitNorm { row, norm });
        }
    }
    let mut g = GraphBuilder::new();
    let z = g.input("z", batch.shape())?;
    let nodes = nt_xent_graph(&mut g, z, temperature)?;
    let graph = g.build();
    let values = graph.evaluate(&[("z", batch)].into_iter().collect())?;
    Ok(NtXent { loss: values.get(nodes.loss).item(), per_pair: values.get(nodes.per_pair).data().to_vec() })
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    /// Rate used by the epoch's last step.
    pub lr: f64,
}

/// `x` with nine significant digits in plain decimal notation.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Loss log as CSV with the given header.
pub fn loss_log_csv(header: &str, records: &[EpochRecord]) -> String {
    let mut out = format!("{header}\n");
    for r in records {
        let _ = writeln!(out, "{},{},{}", r.epoch, format_sig9(r.loss), format_sig9(r.lr));
    }
    out
}

/// Loss log in the pretraining format `epoch,mean_loss,learning_rate`.
pub fn pretrain_log_csv(records: &[EpochRecord]) -> String {
    loss_log_csv("epoch,mean_loss,learning_rate", records)
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Two augmented views per chip, interleaved.
pub fn augmented_views(
    chips: &[&MultispectralChip],
    indices: &[usize],
    seed: u64,
    stage: &str,
    epoch: usize,
) -> Result<Vec<MultispectralChip>, ContrastiveError> {
    let mut views = Vec::with_capacity(2 * chips.len());
    for (chip, &index) in chips.iter().zip(indices) {
        let (a, b) = sample_augmentation_pair(&AugmentationRng::new(seed, stage, epoch as u64, index as u64, 0));
        views.push(apply_augmentation(chip, &a)?);
        views.push(apply_augmentation(chip, &b)?);
    }
    Ok(views)
}

struct TrainGraph {
    graph: Graph,
    loss: NodeId,
}

fn diverged(epoch: usize, e: AutodiffError) -> ContrastiveError {
    match e {
        AutodiffError::NonFiniteResult(d) | AutodiffError::NonFiniteGradient(d) => {
            ContrastiveError::DivergedLoss { epoch, detail: d }
        }
        other => other.into(),
    }
}

/// Contrastive pretraining over `pool`. Each epoch shuffles the pool with a
/// seeded stream, drops the final incomplete batch, draws two augmented
/// views per chip, and takes one optimizer step per batch.
pub fn pretrain(
    pool: &[MultispectralChip],
    stats: &BandStats,
    encoder: &EncoderConfig,
    proj_dim: usize,
    config: &ContrastiveConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<PretrainOutcome, ContrastiveError> {
    config.validate()?;
    if pool.len() < 2 {
        return Err(ContrastiveError::EmptyPool);
    }
    let mut net = Network::new(encoder.clone(), proj_dim, derive_seed(config.seed, "pretrain/init", &[]))?;
    net.set_input_stats(stats, pool[0].bands())?;
    let batch = config.batch_size.min(pool.len());
    let steps_per_epoch = pool.len() / batch;
    let mut optimizer = Optimizer::new(config.optimizer, (steps_per_epoch * config.epochs) as u64);
    let train = {
        let mut g = GraphBuilder::new();
        let nodes = net.build_into(&mut g, 2 * batch, GraphOptions::training(Head::Projection))?;
        let loss = nt_xent_graph(&mut g, nodes.output, config.temperature)?.loss;
        TrainGraph { graph: g.build(), loss }
    };
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut stream(config.seed, "pretrain/shuffle", &[epoch as u64]));
        let (mut total, mut lr) = (0.0, 0.0);
        for step in 0..steps_per_epoch {
            let idx = &order[step * batch..(step + 1) * batch];
            let chips: Vec<&MultispectralChip> = idx.iter().map(|&i| &pool[i]).collect();
            let views = augmented_views(&chips, idx, config.seed, "pretrain", epoch)?;
            let view_refs: Vec<&MultispectralChip> = views.iter().collect();
            let x = net.input_batch(&view_refs)?;
            let (loss, grads, norm_stats) = {
                let bindings = net.bindings(&x);
                let out = train.graph.gradients(train.loss, &bindings).map_err(|e| diverged(epoch + 1, e))?;
                (out.values.get(train.loss).item(), out.grads, out.values.norm_batch_stats())
            };
            lr = optimizer.step(net.params_mut(), &grads)?;
            net.round_to_storage();
            net.update_running_stats(&norm_stats);
            total += loss;
        }
        let record = EpochRecord { epoch: epoch + 1, loss: total / steps_per_epoch as f64, lr };
        if !record.loss.is_finite() {
            return Err(ContrastiveError::DivergedLoss { epoch: epoch + 1, detail: "mean loss".into() });
        }
        progress(&record);
        log.push(record);
    }
    let checkpoint = Checkpoint::new(&net, Stage::Pretrain, config.seed, config.epochs as u64)?;
    Ok(PretrainOutcome { checkpoint, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch<R: AsRef<[f64]>>(rows: &[R]) -> Tensor {
        let rows: Vec<&[f64]> = rows.iter().map(|r| r.as_ref()).collect();
        let d = rows[0].len();
        Tensor::new(vec![rows.len(), d], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn identical_embeddings_give_ln_three() {
        for tau in [0.05, 0.1, 1.0, 3.0] {
            let b = batch(&[&[0.6, 0.8]; 4]);
            let out = nt_xent_loss(&b, tau).unwrap();
            assert!((out.loss - 3f64.ln()).abs() < 1e-12);
            assert_eq!(out.per_pair.len(), 4);
        }
    }

    #[test]
    fn two_clusters_closed_form() {
        let b = batch(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        let out = nt_xent_loss(&b, 1.0).unwrap();
        let e = std::f64::consts::E;
        let expected = -(e / (e + 2.0)).ln();
        assert!((out.loss - expected).abs() < 1e-12);
        assert!(out.per_pair.iter().all(|v| (v - expected).abs() < 1e-12));
        assert!((out.loss - 0.5514).abs() < 5e-5);
    }

    #[test]
    fn errors() {
        let b = batch(&[&[1.0, 0.0]; 3]);
        assert!(matches!(nt_xent_loss(&b, 0.1), Err(ContrastiveError::OddRowCount(3))));
        let b = batch(&[&[1.0, 0.0]; 4]);
        assert!(matches!(nt_xent_loss(&b, 0.0), Err(ContrastiveError::NonPositiveTemperature(_))));
        assert!(matches!(nt_xent_loss(&b, -1.0), Err(ContrastiveError::NonPositiveTemperature(_))));
        let b = batch(&[&[1.0, 0.0]; 2]);
        assert!(matches!(nt_xent_loss(&b, 0.1), Err(ContrastiveError::BatchTooSmall(1))));
        let b = batch(&[&[2.0, 0.0]; 4]);
        assert!(matches!(nt_xent_loss(&b, 0.1), Err(ContrastiveError::NotUnitNorm { row: 0, .. })));
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(5e-4), "0.000500000000");
        assert_eq!(format_sig9(1.0986122886681098), "1.09861229");
        assert_eq!(format_sig9(123.456), "123.456000");
        assert_eq!(format_sig9(0.0), "0");
        let log = pretrain_log_csv(&[EpochRecord { epoch: 1, loss: 2.5, lr: 5e-4 }]);
        assert_eq!(log, "epoch,mean_loss,learning_rate\n1,2.50000000,0.000500000000\n");
    }
}
