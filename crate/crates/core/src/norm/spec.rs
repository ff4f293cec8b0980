use serde::{Deserialize, Serialize};

use super::PartitionKind;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-7;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type")]
pub enum NormVariant {
    Batch,
    Layer,
    Group { groups: usize },
    Instance,
    Switch,
    Local { groups: usize },
}

impl NormVariant {
    /// Number of private `(gamma, beta)` sets.
    pub fn param_sets(self) -> usize {
        match self {
            NormVariant::Local { groups } => groups,
            _ => 1,
        }
    }

    /// Variants whose statistics pool over the batch axis.
    pub fn uses_batch_axis(self) -> bool {
        matches!(self, NormVariant::Batch | NormVariant::Local { .. } | NormVariant::Switch)
    }

    /// Partition for variants whose groups never cross samples.
    pub fn sample_partition(self) -> Option<PartitionKind> {
        match self {
            NormVariant::Layer => Some(PartitionKind::Layer),
            NormVariant::Group { groups } => Some(PartitionKind::Group(groups)),
            NormVariant::Instance => Some(PartitionKind::Instance),
            _ => None,
        }
    }

    pub fn label(self) -> String {
        match self {
            NormVariant::Batch => "batch".into(),
            NormVariant::Layer => "layer".into(),
            NormVariant::Group { groups } => format!("group{groups}"),
            NormVariant::Instance => "instance".into(),
            NormVariant::Switch => "switch".into(),
            NormVariant::Local { groups } => format!("local{groups}"),
        }
    }
}

/// Whether inference uses running (training-time) or recomputed statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatMode {
    Frozen,
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub variant: NormVariant,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_stat_mode")]
    pub stat_mode: StatMode,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}
fn default_stat_mode() -> StatMode {
    StatMode::Dynamic
}

impl NormSpec {
    /// BatchNorm keeps running statistics for inference; every other variant
    /// recomputes statistics from its input.
    pub fn new(variant: NormVariant) -> Self {
        let stat_mode = match variant {
            NormVariant::Batch | NormVariant::Switch => StatMode::Frozen,
            _ => StatMode::Dynamic,
        };
        NormSpec { variant, epsilon: DEFAULT_EPSILON, stat_mode, momentum: DEFAULT_MOMENTUM }
    }

    pub fn batch() -> Self {
        Self::new(NormVariant::Batch)
    }

    pub fn local(groups: usize) -> Self {
        Self::new(NormVariant::Local { groups })
    }

    pub fn with_stat_mode(mut self, mode: StatMode) -> Self {
        self.stat_mode = mode;
        self
    }

    pub fn with_epsilon(mut self, eps: f64) -> Self {
        self.epsilon = eps;
        self
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        match self.variant {
            NormVariant::Group { groups } if groups == 0 || channels % groups != 0 => {
                Err(Error::IndivisibleGroups(format!("GroupNorm K={groups} does not divide C={channels}")))
            }
            NormVariant::Local { groups: 0 } => Err(Error::IndivisibleGroups("LocalNorm K=0".into())),
            NormVariant::Local { .. } if self.stat_mode == StatMode::Frozen => {
                Err(Error::invalid("LocalNorm statistics are always recomputed at test time"))
            }
            v if self.stat_mode == StatMode::Frozen && !v.uses_batch_axis() => Err(Error::invalid(format!(
                "{} has per-sample statistics; frozen mode is undefined",
                v.label()
            ))),
            _ => Ok(()),
        }
    }
}

/// Trainable parameters of one normalization layer.
///
/// `gamma` and `beta` are `[P, C]` with one row per private parameter set
/// (`P = K` for LocalNorm, 1 otherwise). SwitchNorm additionally carries
/// free logits over its (batch, layer, instance) statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub mean_logits: Option<Tensor<T>>,
    pub var_logits: Option<Tensor<T>>,
}

impl<T: Real> NormParams<T> {
    pub fn init(variant: NormVariant, channels: usize) -> Self {
        let p = variant.param_sets();
        let switch = matches!(variant, NormVariant::Switch);
        NormParams {
            gamma: Tensor::ones(&[p, channels]),
            beta: Tensor::zeros(&[p, channels]),
            mean_logits: switch.then(|| Tensor::zeros(&[3])),
            var_logits: switch.then(|| Tensor::zeros(&[3])),
        }
    }

    pub fn param_sets(&self) -> usize {
        self.gamma.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[1]
    }
}

/// Exponential moving averages of per-channel batch statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels], initialized: false }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// `running <- momentum * running + (1 - momentum) * batch`, for mean and variance.
pub fn update_running_stats<T: Real>(
    running: &mut RunningStats<T>,
    batch: &[(f64, f64)],
    momentum: f64,
) -> Result<()> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::invalid(format!("momentum must lie in [0, 1), got {momentum}")));
    }
    if batch.len() != running.channels() {
        return Err(Error::shape(
            "update_running_stats",
            format!("{} batch channels vs {} running", batch.len(), running.channels()),
        ));
    }
    for ((m, v), &(bm, bv)) in running.mean.iter_mut().zip(running.var.iter_mut()).zip(batch) {
        *m = T::lit(momentum * m.f64() + (1.0 - momentum) * bm);
        *v = T::lit(momentum * v.f64() + (1.0 - momentum) * bv);
    }
    running.initialized = true;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn zero_momentum_copies_batch() {
        let mut r = RunningStats::<f64>::new(2);
        update_running_stats(&mut r, &[(1.0, 2.0), (3.0, 4.0)], 0.0).unwrap();
        update_running_stats(&mut r, &[(5.0, 6.0), (7.0, 8.0)], 0.0).unwrap();
        assert_eq!(r.mean, vec![5.0, 7.0]);
        assert_eq!(r.var, vec![6.0, 8.0]);
    }

    #[test]
    fn near_unit_momentum_keeps_init() {
        let mut r = RunningStats::<f64>::new(1);
        let m = 1.0 - f64::EPSILON / 2.0;
        for _ in 0..100 {
            update_running_stats(&mut r, &[(100.0, 100.0)], m).unwrap();
        }
        assert!(r.mean[0].abs() < 1e-10);
        assert!((r.var[0] - 1.0).abs() < 1e-10);
        assert!(update_running_stats(&mut r, &[(0.0, 0.0)], 1.0).is_err());
    }

    #[test]
    fn ema_converges_on_gaussian_batches() {
        // 100 batches of N(3, 4) data.
        let mut rng = Rng::new(11);
        let mut r = RunningStats::<f64>::new(1);
        for _ in 0..100 {
            let xs: Vec<f64> = (0..256).map(|_| 3.0 + 2.0 * rng.normal()).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
            update_running_stats(&mut r, &[(m, v)], 0.9).unwrap();
        }
        assert!((r.mean[0] - 3.0).abs() < 0.1, "mean {}", r.mean[0]);
        assert!((r.var[0] - 4.0).abs() < 0.5, "var {}", r.var[0]);
    }

    #[test]
    fn validation_rules() {
        assert!(NormSpec::batch().validate(4).is_ok());
        assert!(NormSpec::batch().with_epsilon(0.0).validate(4).is_err());
        assert!(NormSpec::new(NormVariant::Group { groups: 3 }).validate(4).is_err());
        assert!(NormSpec::local(4).with_stat_mode(StatMode::Frozen).validate(4).is_err());
        assert!(NormSpec::new(NormVariant::Layer).with_stat_mode(StatMode::Frozen).validate(4).is_err());
        assert_eq!(NormSpec::local(4).stat_mode, StatMode::Dynamic);
    }
}
