//! Sequential CNN container, optimizer, training loop, checkpoints and
//! BatchNorm to LocalNorm transfer.

mod checkpoint;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{lr_at_epoch, sgd_step, Sgd};
pub use train::{train, EpochMetrics, ScaleTrace, TrainConfig, TrainLog};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::{
    build_partition, GroupPartition, NormParams, NormSpec, NormVariant, PartitionKind, RunningStats, StatMode,
};
use crate::tensor::{Padding, Real, Rng, Tape, Tensor, Var};

/// One hidden block. Conv and dense blocks are followed by norm and ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "layer")]
pub enum Block {
    Conv { filters: usize, kernel: usize },
    Pool,
    Dense { units: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `[H, W, C]` of one input image.
    pub input: [usize; 3],
    pub classes: usize,
    pub blocks: Vec<Block>,
    pub norm: NormSpec,
}

impl ModelConfig {
    /// Input-16c-16c-32c-32c-512d-1024d-output with 3x3 convolutions and 2x2 pooling
    /// after each conv pair.
    pub fn mnist(norm: NormSpec) -> Self {
        use Block::*;
        ModelConfig {
            input: [28, 28, 1],
            classes: 10,
            blocks: vec![
                Conv { filters: 16, kernel: 3 },
                Conv { filters: 16, kernel: 3 },
                Pool,
                Conv { filters: 32, kernel: 3 },
                Conv { filters: 32, kernel: 3 },
                Pool,
                Dense { units: 512 },
                Dense { units: 1024 },
            ],
            norm,
        }
    }

    /// Two conv blocks and one hidden dense block, for tests and synthetic data.
    pub fn small(input: [usize; 3], classes: usize, norm: NormSpec) -> Self {
        use Block::*;
        ModelConfig {
            input,
            classes,
            blocks: vec![Conv { filters: 4, kernel: 3 }, Conv { filters: 4, kernel: 3 }, Pool, Dense { units: 16 }],
            norm,
        }
    }

    pub fn with_norm(&self, norm: NormSpec) -> Self {
        ModelConfig { norm, ..self.clone() }
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Conv { w: usize, b: usize },
    Dense { w: usize, b: usize },
    Norm(NormLayer),
    Relu,
    Pool,
    Flatten,
}

#[derive(Clone, Debug)]
struct NormLayer {
    /// Position among the model's norm layers.
    index: usize,
    gamma: usize,
    beta: usize,
    logits: Option<(usize, usize)>,
}

/// How a forward pass obtains normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub enum Stats {
    /// Running averages accumulated during training.
    Frozen,
    /// Statistics recomputed from the input under `Routing`.
    Dynamic(Routing),
}

/// Assignment of a batch to statistic segments and parameter sets.
///
/// The batch is cut into `segments` contiguous blocks that each get their own
/// statistics (for variants that pool over samples); sample `n` uses parameter
/// set `sample_sets[n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    pub segments: usize,
    pub sample_sets: Vec<usize>,
    /// Permit groups holding a single value, whose normalized output is exactly `beta`.
    pub allow_degenerate: bool,
}

impl Routing {
    /// Training layout: `segments` contiguous blocks, block `k` using set `k`
    /// (or set 0 when the model has a single set).
    pub fn blocks(n: usize, segments: usize, param_sets: usize) -> Result<Self> {
        if segments == 0 || n % segments != 0 {
            return Err(Error::IndivisibleGroups(format!("{segments} segments do not divide batch {n}")));
        }
        if param_sets != 1 && param_sets != segments {
            return Err(Error::invalid(format!("{param_sets} parameter sets for {segments} segments")));
        }
        let per = n / segments;
        let sample_sets = (0..n).map(|i| if param_sets == 1 { 0 } else { i / per }).collect();
        Ok(Routing { segments, sample_sets, allow_degenerate: false })
    }

    /// Whole batch as one segment, every sample using `set`.
    pub fn uniform(n: usize, set: usize) -> Self {
        Routing { segments: 1, sample_sets: vec![set; n], allow_degenerate: false }
    }

    pub fn allowing_degenerate(mut self, allow: bool) -> Self {
        self.allow_degenerate = allow;
        self
    }
}

/// Output of [`Model::forward`].
pub struct Forward {
    pub logits: Var,
    /// One tape variable per model parameter, in [`Model::param_names`] order.
    pub params: Vec<Var>,
    /// Per norm layer, the per-channel batch statistics when the layer pooled the
    /// whole batch as one segment (used to update running averages).
    pub batch_stats: Vec<Option<Vec<(f64, f64)>>>,
}

/// Sequential classifier. Parameters live in a flat named list.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    layers: Vec<Layer>,
    running: Vec<RunningStats<T>>,
    norm_channels: Vec<usize>,
}

impl<T: Real> Model<T> {
    /// He-uniform weights, zero biases, `gamma = 1`, `beta = 0`.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let [h0, w0, c0] = config.input;
        if h0 == 0 || w0 == 0 || c0 == 0 || config.classes < 2 {
            return Err(Error::invalid(format!("bad input {:?} / classes {}", config.input, config.classes)));
        }
        let mut m = Model {
            config: config.clone(),
            names: Vec::new(),
            params: Vec::new(),
            layers: Vec::new(),
            running: Vec::new(),
            norm_channels: Vec::new(),
        };
        let (mut h, mut w, mut c) = (h0, w0, c0);
        let mut flat = false;
        let (mut convs, mut denses) = (0, 0);
        for block in &config.blocks {
            match *block {
                Block::Conv { filters, kernel } => {
                    if flat {
                        return Err(Error::invalid("conv block after a dense block"));
                    }
                    if filters == 0 || kernel == 0 {
                        return Err(Error::invalid("conv block needs positive filters and kernel"));
                    }
                    let fan_in = kernel * kernel * c;
                    let wi = m.push_param(format!("conv{convs}.w"), he_uniform(&[kernel, kernel, c, filters], fan_in, rng));
                    let bi = m.push_param(format!("conv{convs}.b"), Tensor::zeros(&[filters]));
                    m.layers.push(Layer::Conv { w: wi, b: bi });
                    c = filters;
                    convs += 1;
                    m.push_norm(c)?;
                }
                Block::Pool => {
                    if flat || h < 2 || w < 2 {
                        return Err(Error::invalid(format!("cannot pool a {h}x{w} map")));
                    }
                    m.layers.push(Layer::Pool);
                    h /= 2;
                    w /= 2;
                }
                Block::Dense { units } => {
                    if units == 0 {
                        return Err(Error::invalid("dense block needs positive units"));
                    }
                    let d = m.flatten_if_needed(&mut flat, h * w * c);
                    let wi = m.push_param(format!("dense{denses}.w"), he_uniform(&[d, units], d, rng));
                    let bi = m.push_param(format!("dense{denses}.b"), Tensor::zeros(&[units]));
                    m.layers.push(Layer::Dense { w: wi, b: bi });
                    (h, w, c) = (1, 1, units);
                    denses += 1;
                    m.push_norm(units)?;
                }
            }
        }
        let d = m.flatten_if_needed(&mut flat, h * w * c);
        let wi = m.push_param("head.w".into(), he_uniform(&[d, config.classes], d, rng));
        let bi = m.push_param("head.b".into(), Tensor::zeros(&[config.classes]));
        m.layers.push(Layer::Dense { w: wi, b: bi });
        Ok(m)
    }

    fn push_param(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn flatten_if_needed(&mut self, flat: &mut bool, d: usize) -> usize {
        if !*flat {
            self.layers.push(Layer::Flatten);
            *flat = true;
        }
        d
    }

    fn push_norm(&mut self, channels: usize) -> Result<()> {
        let spec = self.config.norm;
        spec.validate(channels)?;
        let index = self.running.len();
        let p = NormParams::<T>::init(spec.variant, channels);
        let gamma = self.push_param(format!("norm{index}.gamma"), p.gamma);
        let beta = self.push_param(format!("norm{index}.beta"), p.beta);
        let logits = match (p.mean_logits, p.var_logits) {
            (Some(ml), Some(vl)) => Some((
                self.push_param(format!("norm{index}.mean_logits"), ml),
                self.push_param(format!("norm{index}.var_logits"), vl),
            )),
            _ => None,
        };
        self.layers.push(Layer::Norm(NormLayer { index, gamma, beta, logits }));
        self.layers.push(Layer::Relu);
        self.running.push(RunningStats::new(channels));
        self.norm_channels.push(channels);
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn norm_spec(&self) -> &NormSpec {
        &self.config.norm
    }

    /// Private parameter sets per norm layer (`K` for LocalNorm, else 1).
    pub fn param_sets(&self) -> usize {
        self.config.norm.variant.param_sets()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    /// Total trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Channels of each norm layer, in order.
    pub fn norm_channels(&self) -> &[usize] {
        &self.norm_channels
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.running
    }

    /// `gamma` and `beta` of norm layer `i`, each `[P, C]`.
    pub fn norm_affine(&self, i: usize) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.layers.iter().find_map(|l| match l {
            Layer::Norm(n) if n.index == i => Some((&self.params[n.gamma], &self.params[n.beta])),
            _ => None,
        })
    }

    pub(crate) fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape("set_params", format!("{} tensors for {}", params.len(), self.params.len())));
        }
        for ((name, old), new) in self.names.iter().zip(&self.params).zip(&params) {
            if old.shape() != new.shape() {
                return Err(Error::shape("set_params", format!("{name}: {:?} vs {:?}", old.shape(), new.shape())));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Default statistics for routine evaluation: running averages for variants
    /// trained with them, otherwise `K`-segment dynamic statistics over the batch.
    pub fn default_stats(&self, n: usize) -> Result<Stats> {
        match self.config.norm.stat_mode {
            StatMode::Frozen => Ok(Stats::Frozen),
            StatMode::Dynamic => {
                let k = self.param_sets();
                Ok(Stats::Dynamic(Routing::blocks(n, k, k)?))
            }
        }
    }

    /// Records the forward pass of `x` (`[N, H, W, C]`, already scaled) on `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, stats: &Stats) -> Result<Forward> {
        let shape = tape.value(x)?.shape().to_vec();
        let [h, w, c] = self.config.input;
        if shape.len() != 4 || shape[1..] != [h, w, c] {
            return Err(Error::shape("forward", format!("input {shape:?} for model input {:?}", self.config.input)));
        }
        let n = shape[0];
        if let Stats::Dynamic(r) = stats {
            if r.sample_sets.len() != n {
                return Err(Error::shape("forward", format!("{} routing entries for batch {n}", r.sample_sets.len())));
            }
        }
        let params: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect::<Result<_>>()?;
        let mut batch_stats = vec![None; self.running.len()];
        let mut cur = x;
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv { w, b } => tape.conv2d(cur, params[*w], params[*b], 1, Padding::Same)?,
                Layer::Dense { w, b } => tape.dense(cur, params[*w], params[*b])?,
                Layer::Relu => tape.relu(cur)?,
                Layer::Pool => tape.max_pool2(cur)?,
                Layer::Flatten => tape.flatten(cur)?,
                Layer::Norm(nl) => {
                    let (y, st) = self.norm_forward(tape, cur, nl, &params, stats)?;
                    batch_stats[nl.index] = st;
                    y
                }
            };
        }
        Ok(Forward { logits: cur, params, batch_stats })
    }

    fn norm_forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        nl: &NormLayer,
        params: &[Var],
        stats: &Stats,
    ) -> Result<(Var, Option<Vec<(f64, f64)>>)> {
        let spec = &self.config.norm;
        let shape = tape.value(x)?.nhwc()?;
        let (gamma, beta) = (params[nl.gamma], params[nl.beta]);
        let running = &self.running[nl.index];
        match stats {
            Stats::Frozen => {
                if !matches!(spec.variant, NormVariant::Batch | NormVariant::Switch) {
                    return Err(Error::invalid(format!("{} has no running statistics", spec.variant.label())));
                }
                if !running.initialized {
                    return Err(Error::UninitializedStats(format!("norm{}", nl.index)));
                }
                if let Some((ml, vl)) = nl.logits {
                    let part = GroupPartition::new(PartitionKind::Batch, shape)?;
                    let frozen = Some((running.mean.as_slice(), running.var.as_slice()));
                    let (y, _) =
                        tape.normalize_switch(x, gamma, beta, params[ml], params[vl], part, frozen, spec.epsilon)?;
                    return Ok((y, None));
                }
                let y = tape.normalize_frozen(x, gamma, beta, &running.mean, &running.var, &vec![0; shape[0]], spec.epsilon)?;
                Ok((y, None))
            }
            Stats::Dynamic(r) => {
                let (kind, sets) = match spec.variant.sample_partition() {
                    Some(kind) => (kind, vec![0; shape[0]]),
                    None => (PartitionKind::Local(r.segments), r.sample_sets.clone()),
                };
                let part = match kind {
                    PartitionKind::Local(1) => build_partition(NormVariant::Batch, shape)?,
                    _ => GroupPartition::new(kind, shape)?,
                };
                if !r.allow_degenerate && part.group_sizes().iter().any(|&s| s < 2) {
                    return Err(Error::DegenerateStatistics(format!(
                        "norm{}: {} groups hold a single value",
                        nl.index,
                        spec.variant.label()
                    )));
                }
                let whole_batch = part.kind() == PartitionKind::Batch;
                if let Some((ml, vl)) = nl.logits {
                    let (y, st) =
                        tape.normalize_switch(x, gamma, beta, params[ml], params[vl], part, None, spec.epsilon)?;
                    return Ok((y, whole_batch.then_some(st)));
                }
                let (y, st) = tape.normalize(x, gamma, beta, part, &sets, spec.epsilon)?;
                Ok((y, whole_batch.then_some(st)))
            }
        }
    }

    /// Logits for `x` without recording gradients.
    pub fn logits(&self, x: &Tensor<T>, stats: &Stats) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let xv = tape.input(x.clone())?;
        let f = self.forward(&mut tape, xv, stats)?;
        Ok(tape.value(f.logits)?.clone())
    }

    /// Class probabilities for `x` without recording gradients.
    pub fn predict_proba(&self, x: &Tensor<T>, stats: &Stats) -> Result<Tensor<T>> {
        crate::tensor::softmax_rows(&self.logits(x, stats)?)
    }

    /// Replaces every BatchNorm layer with LocalNorm(K): each of the `K` parameter
    /// sets starts as a copy of the BatchNorm `(gamma, beta)`, every other weight is
    /// copied and statistics become dynamic. `batch_size` is the batch the result
    /// will be trained or evaluated with and must be divisible by `K`.
    pub fn transfer_bn_to_local(&self, k: usize, batch_size: usize) -> Result<Model<T>> {
        if self.config.norm.variant != NormVariant::Batch {
            return Err(Error::invalid(format!("transfer needs BatchNorm layers, found {}", self.config.norm.variant.label())));
        }
        if k == 0 || batch_size % k != 0 {
            return Err(Error::IndivisibleGroups(format!("K={k} does not divide batch {batch_size}")));
        }
        let spec = NormSpec { variant: NormVariant::Local { groups: k }, stat_mode: StatMode::Dynamic, ..self.config.norm };
        let config = self.config.with_norm(spec);
        let mut out = Model::new(config, &mut Rng::new(0))?;
        let mut params = Vec::with_capacity(self.params.len());
        for (name, p) in self.names.iter().zip(&self.params) {
            if name.ends_with(".gamma") || name.ends_with(".beta") {
                let c = p.shape()[1];
                params.push(Tensor::from_fn(&[k, c], |i| p.data()[i % c]));
            } else {
                params.push(p.clone());
            }
        }
        out.set_params(params)?;
        Ok(out)
    }
}

fn he_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -limit, limit, rng)
}

/// Scales raw `[0, 255]` pixels into `[0, 1]` model inputs.
pub fn scale_pixels<T: Real>(pixels: &Tensor<f32>) -> Tensor<T> {
    Tensor::from_fn(pixels.shape(), |i| T::lit(pixels.data()[i] as f64 / 255.0))
}
