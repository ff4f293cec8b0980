use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{lr_at_epoch, scale_pixels, Model, Routing, Sgd, Stats};
use crate::data::{batch_iterator, Dataset};
use crate::error::{Error, Result};
use crate::norm::update_running_stats;
use crate::tensor::{Real, Rng, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 5, batch_size: 100, lr: 0.01, momentum: 0.9, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Spread of one norm layer's scaling parameters across its parameter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleTrace {
    /// 0 is the initialized model.
    pub epoch: usize,
    pub layer: usize,
    /// `"gamma"` or `"beta"`.
    pub param: &'static str,
    /// Mean over sets and channels.
    pub group_mean: f64,
    /// Variance across sets, averaged over channels.
    pub group_var: f64,
}

#[derive(Clone, Debug)]
pub struct TrainLog {
    pub metrics: Vec<EpochMetrics>,
    pub trace: Vec<ScaleTrace>,
    /// Wall-clock seconds per epoch; kept apart from the reproducible metrics.
    pub epoch_seconds: Vec<f64>,
    pub steps: usize,
    /// Shuffle generator after the last epoch.
    pub rng: Rng,
}

/// Cross-set statistics of every norm layer's `gamma` and `beta`.
pub fn scale_trace<T: Real>(model: &Model<T>, epoch: usize) -> Vec<ScaleTrace> {
    let mut out = Vec::new();
    for layer in 0..model.norm_channels().len() {
        let Some((g, b)) = model.norm_affine(layer) else { continue };
        for (param, t) in [("gamma", g), ("beta", b)] {
            let (p, c) = (t.shape()[0], t.shape()[1]);
            let v: Vec<f64> = t.data().iter().map(|x| x.f64()).collect();
            let group_mean = v.iter().sum::<f64>() / v.len() as f64;
            let mut group_var = 0.0;
            for ci in 0..c {
                let m = (0..p).map(|k| v[k * c + ci]).sum::<f64>() / p as f64;
                group_var += (0..p).map(|k| (v[k * c + ci] - m).powi(2)).sum::<f64>() / p as f64;
            }
            out.push(ScaleTrace { epoch, layer, param, group_mean, group_var: group_var / c as f64 });
        }
    }
    out
}

fn argmax_rows<T: Real>(t: &Tensor<T>) -> Vec<usize> {
    let m = t.shape()[1];
    t.data()
        .chunks(m)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Trains `model` in place with momentum SGD and the step schedule.
///
/// Every epoch reshuffles `train` with a generator derived from `cfg.seed` and
/// splits each batch into `K` contiguous blocks, block `k` routed through
/// parameter set `k`. The sample stream depends only on the seed and the
/// dataset, so models differing only in their norm see identical batches.
pub fn train<T: Real>(model: &mut Model<T>, train: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if train.image_shape() != model.config().input {
        return Err(Error::shape(
            "train",
            format!("images {:?} for model input {:?}", train.image_shape(), model.config().input),
        ));
    }
    let k = model.param_sets();
    if cfg.batch_size == 0 || cfg.batch_size % k != 0 {
        return Err(Error::IndivisibleGroups(format!("K={k} does not divide batch {}", cfg.batch_size)));
    }
    if cfg.batch_size > train.len() {
        return Err(Error::invalid(format!("batch {} exceeds training set {}", cfg.batch_size, train.len())));
    }
    let momentum = model.norm_spec().momentum;
    let mut rng = Rng::derive(cfg.seed, 1);
    let mut sgd = Sgd::new(model.params(), cfg.momentum);
    let mut log = TrainLog {
        metrics: Vec::new(),
        trace: scale_trace(model, 0),
        epoch_seconds: Vec::new(),
        steps: 0,
        rng: rng.clone(),
    };
    let routing = Routing::blocks(cfg.batch_size, k, k)?;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_at_epoch(cfg.lr, epoch, cfg.epochs);
        let batches = batch_iterator(train.len(), cfg.batch_size, k, &mut rng)?;
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for (step, batch) in batches.iter().enumerate() {
            let diverged = |loss: f64| Error::Diverged { epoch: epoch + 1, step, loss };
            let x = scale_pixels::<T>(&train.images.gather_batch(&batch.indices)?);
            let labels: Vec<usize> = batch.indices.iter().map(|&i| train.labels[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.input(x)?;
            let f = model.forward(&mut tape, xv, &Stats::Dynamic(routing.clone())).map_err(|e| match e {
                Error::NonFinite(_) => diverged(f64::NAN),
                e => e,
            })?;
            let loss = tape.softmax_cross_entropy(f.logits, &labels).map_err(|e| match e {
                Error::NonFinite(_) => diverged(f64::NAN),
                e => e,
            })?;
            let lv = tape.value(loss)?.item()?.f64();
            if !lv.is_finite() {
                return Err(diverged(lv));
            }
            let preds = argmax_rows(tape.value(f.logits)?);
            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
            seen += labels.len();
            loss_sum += lv * labels.len() as f64;
            let mut grads = tape.backward(loss)?;
            let g: Vec<Tensor<T>> = f
                .params
                .iter()
                .zip(model.params())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            sgd.step(model.params_mut(), &g, lr)?;
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(diverged(lv));
            }
            for (i, st) in f.batch_stats.iter().enumerate() {
                if let Some(st) = st {
                    update_running_stats(&mut model.running_stats_mut()[i], st, momentum)?;
                }
            }
            log.steps += 1;
        }
        let test_accuracy = match test {
            Some(ds) => Some(crate::eval::accuracy_default(model, ds, cfg.batch_size)?),
            None => None,
        };
        log.metrics.push(EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            test_accuracy,
        });
        log.trace.extend(scale_trace(model, epoch + 1));
        log.epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    log.rng = rng;
    Ok(log)
}
