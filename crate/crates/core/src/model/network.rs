use std::collections::BTreeMap;

use rand::Rng;

use super::{EncoderConfig, ModelError};
use crate::autodiff::{Bindings, GraphBuilder, NodeId, NormBatchStats, ParamMap, Tensor};
use crate::raster::{Band, BandStats, MultispectralChip};
use crate::rng::stream;

/// Name of the graph input holding the normalized image batch.
pub const INPUT_NAME: &str = "x";
pub const NUM_CLASSES: usize = 2;
/// Weight of the newest batch in the running-statistics average.
pub const RUNNING_STATS_UPDATE: f64 = 0.1;
pub const DEFAULT_PROJ_DIM: usize = 32;

const INPUT_MEAN: &str = "input.mean";
const INPUT_STD: &str = "input.std";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Two-layer MLP ending in row-wise l2 normalization.
    Projection,
    /// Linear layer followed by softmax over the two classes.
    Classifier,
}

/// Options for building a network graph.
#[derive(Clone, Copy, Debug)]
pub struct GraphOptions {
    pub head: Head,
    /// Batch statistics in normalization layers (otherwise running statistics).
    pub training: bool,
    /// Encoder tensors are bound as plain inputs and receive no gradients.
    pub freeze_encoder: bool,
}

impl GraphOptions {
    pub fn inference(head: Head) -> Self {
        Self { head, training: false, freeze_encoder: true }
    }

    pub fn training(head: Head) -> Self {
        Self { head, training: true, freeze_encoder: false }
    }
}

/// Node handles of a network built into a [`GraphBuilder`].
#[derive(Clone, Copy, Debug)]
pub struct NetworkNodes {
    pub input: NodeId,
    pub embedding: NodeId,
    /// Unit-norm projections or class probabilities, depending on the head.
    pub output: NodeId,
    /// Pre-softmax scores of the classifier head.
    pub logits: Option<NodeId>,
}

/// Per-tensor and total counts of learnable scalars.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterCount {
    pub per_tensor: BTreeMap<String, usize>,
    pub total: usize,
}

impl ParameterCount {
    /// Sum over tensors whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> usize {
        self.per_tensor.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v).sum()
    }
}

/// An encoder with projection and classifier heads. Learnable tensors live
/// in `params`; normalization running statistics and the input
/// standardization live in `buffers`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: EncoderConfig,
    proj_dim: usize,
    params: ParamMap,
    buffers: ParamMap,
}

enum Init {
    He { fan_in: usize },
    Zeros,
    Ones,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

struct Block {
    prefix: String,
    in_channels: usize,
    channels: usize,
    stride: usize,
    skip: bool,
}

fn blocks(config: &EncoderConfig) -> Vec<Block> {
    let mut out = Vec::new();
    let mut in_channels = config.stem_channels;
    for (s, stage) in config.stages.iter().enumerate() {
        for b in 0..stage.blocks {
            let stride = if b == 0 && stage.downsample { 2 } else { 1 };
            out.push(Block {
                prefix: format!("encoder.s{s}.b{b}"),
                in_channels,
                channels: stage.channels,
                stride,
                skip: stride != 1 || in_channels != stage.channels,
            });
            in_channels = stage.channels;
        }
    }
    out
}

fn conv_spec(name: &str, out: usize, inp: usize, k: usize) -> Spec {
    Spec { name: name.to_string(), shape: vec![out, inp, k, k], init: Init::He { fan_in: inp * k * k } }
}

fn norm_specs(prefix: &str, channels: usize) -> [Spec; 2] {
    [
        Spec { name: format!("{prefix}.scale"), shape: vec![channels], init: Init::Ones },
        Spec { name: format!("{prefix}.shift"), shape: vec![channels], init: Init::Zeros },
    ]
}

fn linear_specs(prefix: &str, inp: usize, out: usize) -> [Spec; 2] {
    [
        Spec { name: format!("{prefix}.w"), shape: vec![inp, out], init: Init::He { fan_in: inp } },
        Spec { name: format!("{prefix}.b"), shape: vec![out], init: Init::Zeros },
    ]
}

fn encoder_specs(config: &EncoderConfig) -> Vec<Spec> {
    let mut specs = vec![conv_spec("encoder.stem.conv.w", config.stem_channels, config.input.bands, 3)];
    specs.extend(norm_specs("encoder.stem.norm", config.stem_channels));
    for b in blocks(config) {
        specs.push(conv_spec(&format!("{}.conv1.w", b.prefix), b.channels, b.in_channels, 3));
        specs.extend(norm_specs(&format!("{}.norm1", b.prefix), b.channels));
        specs.push(conv_spec(&format!("{}.conv2.w", b.prefix), b.channels, b.channels, 3));
        specs.extend(norm_specs(&format!("{}.norm2", b.prefix), b.channels));
        if b.skip {
            specs.push(conv_spec(&format!("{}.skip.w", b.prefix), b.channels, b.in_channels, 1));
            specs.push(Spec { name: format!("{}.skip.b", b.prefix), shape: vec![b.channels], init: Init::Zeros });
        }
    }
    specs.extend(linear_specs("encoder.embed", config.final_channels(), config.embedding_dim));
    specs
}

fn projection_specs(embed: usize, proj_dim: usize) -> Vec<Spec> {
    let mut specs: Vec<Spec> = linear_specs("proj.l1", embed, embed).into();
    specs.extend(linear_specs("proj.l2", embed, proj_dim));
    specs
}

fn classifier_specs(embed: usize) -> Vec<Spec> {
    linear_specs("cls", embed, NUM_CLASSES).into()
}

fn norm_keys(config: &EncoderConfig) -> Vec<(String, usize)> {
    let mut keys = vec![("encoder.stem.norm".to_string(), config.stem_channels)];
    for b in blocks(config) {
        keys.push((format!("{}.norm1", b.prefix), b.channels));
        keys.push((format!("{}.norm2", b.prefix), b.channels));
    }
    keys
}

/// He-uniform (or constant) initialization, each tensor from its own
/// name-keyed stream so that heads can be re-drawn independently.
fn initialize(specs: &[Spec], seed: u64, params: &mut ParamMap) {
    for spec in specs {
        let mut t = match spec.init {
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::full(&spec.shape, 1.0),
            Init::He { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut rng = stream(seed, &format!("model/init/{}", spec.name), &[]);
                let n: usize = spec.shape.iter().product();
                Tensor::new(spec.shape.clone(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
                    .expect("shape matches count")
            }
        };
        t.round_to_f32();
        params.insert(spec.name.clone(), t);
    }
}

impl Network {
    pub fn new(config: EncoderConfig, proj_dim: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if proj_dim == 0 {
            return Err(ModelError::InvalidConfig("proj_dim must be positive".into()));
        }
        let mut params = ParamMap::new();
        initialize(&encoder_specs(&config), seed, &mut params);
        initialize(&projection_specs(config.embedding_dim, proj_dim), seed, &mut params);
        initialize(&classifier_specs(config.embedding_dim), seed, &mut params);
        let mut buffers = ParamMap::new();
        for (key, c) in norm_keys(&config) {
            buffers.insert(format!("{key}.running_mean"), Tensor::zeros(&[c]));
            buffers.insert(format!("{key}.running_var"), Tensor::full(&[c], 1.0));
        }
        buffers.insert(INPUT_MEAN.into(), Tensor::zeros(&[config.input.bands]));
        buffers.insert(INPUT_STD.into(), Tensor::full(&[config.input.bands], 1.0));
        Ok(Self { config, proj_dim, params, buffers })
    }

    /// Reassembles a network from stored tensors, checking that exactly the
    /// expected names and shapes are present.
    pub fn from_parts(
        config: EncoderConfig,
        proj_dim: usize,
        params: ParamMap,
        buffers: ParamMap,
    ) -> Result<Self, ModelError> {
        let template = Self::new(config, proj_dim, 0)?;
        for (what, expected, got) in [("parameter", &template.params, &params), ("buffer", &template.buffers, &buffers)]
        {
            if expected.len() != got.len() {
                return Err(ModelError::ConfigMismatch(format!(
                    "expected {} {what} tensors, found {}",
                    expected.len(),
                    got.len()
                )));
            }
            for (name, t) in expected {
                match got.get(name) {
                    Some(g) if g.shape() == t.shape() => {}
                    Some(g) => {
                        return Err(ModelError::ConfigMismatch(format!(
                            "{what} `{name}` has shape {:?}, expected {:?}",
                            g.shape(),
                            t.shape()
                        )))
                    }
                    None => return Err(ModelError::ConfigMismatch(format!("{what} `{name}` missing"))),
                }
            }
        }
        Ok(Self { params, buffers, ..template })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn proj_dim(&self) -> usize {
        self.proj_dim
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamMap {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamMap {
        &self.buffers
    }

    /// Rounds every tensor to single precision, the checkpoint storage format.
    pub fn round_to_storage(&mut self) {
        for t in self.params.values_mut().chain(self.buffers.values_mut()) {
            t.round_to_f32();
        }
    }

    pub fn is_encoder_tensor(name: &str) -> bool {
        name.starts_with("encoder.")
    }

    /// Fresh classifier weights, as when a pretrained encoder starts fine-tuning.
    pub fn reset_classifier(&mut self, seed: u64) {
        initialize(&classifier_specs(self.config.embedding_dim), seed, &mut self.params);
    }

    /// Copies of the encoder tensors only.
    pub fn encoder_params(&self) -> ParamMap {
        self.params.iter().filter(|(k, _)| Self::is_encoder_tensor(k)).map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn set_input_stats(&mut self, stats: &BandStats, bands: &[Band]) -> Result<(), ModelError> {
        if bands.len() != self.config.input.bands {
            return Err(ModelError::ConfigMismatch(format!(
                "{} bands for a {}-band encoder",
                bands.len(),
                self.config.input.bands
            )));
        }
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for &b in bands {
            let (m, s) = stats.get(b).ok_or(crate::raster::RasterError::MissingBandStats(b))?;
            mean.push(m);
            std.push(s);
        }
        let mut mean = Tensor::from_vec(mean);
        let mut std = Tensor::from_vec(std);
        mean.round_to_f32();
        std.round_to_f32();
        self.buffers.insert(INPUT_MEAN.into(), mean);
        self.buffers.insert(INPUT_STD.into(), std);
        Ok(())
    }

    /// Standardizes chips into an NCHW batch using the stored input statistics.
    pub fn input_batch(&self, chips: &[&MultispectralChip]) -> Result<Tensor, ModelError> {
        let shape = self.config.input;
        let mean = self.buffers[INPUT_MEAN].data();
        let std = self.buffers[INPUT_STD].data();
        let plane = shape.height * shape.width;
        let mut data = Vec::with_capacity(chips.len() * plane * shape.bands);
        for chip in chips {
            if chip.height() != shape.height || chip.width() != shape.width || chip.bands().len() != shape.bands {
                return Err(ModelError::ConfigMismatch(format!(
                    "chip {}×{}×{} for encoder input {}×{}×{}",
                    chip.height(),
                    chip.width(),
                    chip.bands().len(),
                    shape.height,
                    shape.width,
                    shape.bands
                )));
            }
            for (i, &v) in chip.data().iter().enumerate() {
                let b = i / plane;
                data.push((v as f64 - mean[b]) / std[b]);
            }
        }
        Ok(Tensor::new(vec![chips.len(), shape.bands, shape.height, shape.width], data)?)
    }

    /// Adds the network to `g`, reading the batch from input [`INPUT_NAME`].
    pub fn build_into(
        &self,
        g: &mut GraphBuilder,
        batch: usize,
        opts: GraphOptions,
    ) -> Result<NetworkNodes, ModelError> {
        let c = &self.config;
        let x = g.input(INPUT_NAME, &[batch, c.input.bands, c.input.height, c.input.width])?;
        let mut b = Builder { g, net: self, opts };
        let stem = b.conv("encoder.stem.conv", x, c.stem_stride, false)?;
        let stem = b.norm("encoder.stem.norm", stem)?;
        let mut h = b.g.relu(stem)?;
        for block in blocks(c) {
            let p = &block.prefix;
            let y = b.conv(&format!("{p}.conv1"), h, block.stride, false)?;
            let y = b.norm(&format!("{p}.norm1"), y)?;
            let y = b.g.relu(y)?;
            let y = b.conv(&format!("{p}.conv2"), y, 1, false)?;
            let y = b.norm(&format!("{p}.norm2"), y)?;
            let skip = if block.skip { b.conv(&format!("{p}.skip"), h, block.stride, true)? } else { h };
            let sum = b.g.add(y, skip)?;
            h = b.g.relu(sum)?;
        }
        let pooled = b.g.global_avg_pool(h)?;
        let embedding = b.linear("encoder.embed", pooled)?;
        let (output, logits) = match opts.head {
            Head::Projection => {
                let hidden = b.linear("proj.l1", embedding)?;
                let hidden = b.g.relu(hidden)?;
                let z = b.linear("proj.l2", hidden)?;
                (b.g.l2_normalize(z)?, None)
            }
            Head::Classifier => {
                let logits = b.linear("cls", embedding)?;
                (b.g.softmax(logits)?, Some(logits))
            }
        };
        Ok(NetworkNodes { input: x, embedding, output, logits })
    }

    /// Binds every tensor of the network plus the input batch.
    pub fn bindings<'a>(&'a self, x: &'a Tensor) -> Bindings<'a> {
        let mut b: Bindings<'a> = self.params.iter().chain(&self.buffers).map(|(k, v)| (k.as_str(), v)).collect();
        b.insert(INPUT_NAME, x);
        b
    }

    /// Inference-mode forward pass, returning the head output.
    pub fn forward(&self, x: &Tensor, head: Head) -> Result<Tensor, ModelError> {
        let batch = x.shape().first().copied().unwrap_or(0);
        let mut g = GraphBuilder::new();
        let nodes = self.build_into(&mut g, batch, GraphOptions::inference(head))?;
        let graph = g.build();
        let values = graph.evaluate(&self.bindings(x))?;
        Ok(values.get(nodes.output).clone())
    }

    /// Inference-mode classifier scores before the softmax, shape `(batch, 2)`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let batch = x.shape().first().copied().unwrap_or(0);
        let mut g = GraphBuilder::new();
        let nodes = self.build_into(&mut g, batch, GraphOptions::inference(Head::Classifier))?;
        let graph = g.build();
        let values = graph.evaluate(&self.bindings(x))?;
        Ok(values.get(nodes.logits.expect("classifier head exposes logits")).clone())
    }

    /// Takes over another network's input standardization.
    pub fn copy_input_stats(&mut self, other: &Network) -> Result<(), ModelError> {
        if other.config.input != self.config.input {
            return Err(ModelError::ConfigMismatch("input shapes differ".into()));
        }
        for key in [INPUT_MEAN, INPUT_STD] {
            self.buffers.insert(key.into(), other.buffers[key].clone());
        }
        Ok(())
    }

    /// Inference-mode embeddings (encoder output), shape `(batch, embedding_dim)`.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let batch = x.shape().first().copied().unwrap_or(0);
        let mut g = GraphBuilder::new();
        let nodes = self.build_into(&mut g, batch, GraphOptions::inference(Head::Projection))?;
        let graph = g.build();
        let values = graph.evaluate(&self.bindings(x))?;
        Ok(values.get(nodes.embedding).clone())
    }

    /// Folds batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[NormBatchStats]) {
        for s in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                if let Some(buf) = self.buffers.get_mut(&format!("{}.{suffix}", s.key)) {
                    for (r, &v) in buf.data_mut().iter_mut().zip(batch) {
                        *r = ((1.0 - RUNNING_STATS_UPDATE) * *r + RUNNING_STATS_UPDATE * v) as f32 as f64;
                    }
                }
            }
        }
    }
}

struct Builder<'g, 'n> {
    g: &'g mut GraphBuilder,
    net: &'n Network,
    opts: GraphOptions,
}

impl Builder<'_, '_> {
    fn tensor(&mut self, name: &str) -> Result<NodeId, ModelError> {
        let shape = self.net.params[name].shape().to_vec();
        let frozen = self.opts.freeze_encoder && Network::is_encoder_tensor(name);
        Ok(if frozen { self.g.input(name, &shape)? } else { self.g.param(name, &shape)? })
    }

    fn conv(&mut self, prefix: &str, x: NodeId, stride: usize, bias: bool) -> Result<NodeId, ModelError> {
        let w = self.tensor(&format!("{prefix}.w"))?;
        let b = if bias { Some(self.tensor(&format!("{prefix}.b"))?) } else { None };
        Ok(self.g.conv2d(x, w, b, stride)?)
    }

    fn norm(&mut self, key: &str, x: NodeId) -> Result<NodeId, ModelError> {
        let scale = self.tensor(&format!("{key}.scale"))?;
        let shift = self.tensor(&format!("{key}.shift"))?;
        Ok(if self.opts.training {
            self.g.channel_affine_norm_train(key, x, scale, shift)?
        } else {
            let mean_name = format!("{key}.running_mean");
            let var_name = format!("{key}.running_var");
            let shape = self.net.buffers[&mean_name].shape().to_vec();
            let mean = self.g.input(&mean_name, &shape)?;
            let var = self.g.input(&var_name, &shape)?;
            self.g.channel_affine_norm_eval(key, x, scale, shift, mean, var)?
        })
    }

    fn linear(&mut self, prefix: &str, x: NodeId) -> Result<NodeId, ModelError> {
        let w = self.tensor(&format!("{prefix}.w"))?;
        let b = self.tensor(&format!("{prefix}.b"))?;
        let y = self.g.matmul(x, w)?;
        Ok(self.g.add(y, b)?)
    }
}

/// Counts every learnable scalar, per named tensor.
pub fn count_parameters(network: &Network) -> ParameterCount {
    let per_tensor: BTreeMap<String, usize> = network.params.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let total = per_tensor.values().sum();
    ParameterCount { per_tensor, total }
}
