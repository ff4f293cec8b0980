//! Normalization layers expressed as index-predicate partitions.
//!
//! Every variant computes `gamma * (x - mu_g) / sqrt(var_g + eps) + beta`, where
//! `g` is the computational group of the element. Variants differ only in which
//! elements share a group:
//!
//! | variant  | same group iff                              |
//! |----------|---------------------------------------------|
//! | Batch    | same channel                                |
//! | Layer    | same sample                                 |
//! | Group(K) | same sample, same block of `C/K` channels   |
//! | Instance | same sample, same channel                   |
//! | Local(K) | same channel, same block of `N/K` samples   |
//!
//! LocalNorm also gives every block of samples its own `(gamma_k, beta_k)`.
//! SwitchNorm mixes the batch, layer and instance statistics.

pub(crate) mod engine;
mod partition;
mod spec;

pub use partition::{GroupPartition, PartitionKind};
pub use spec::{
    update_running_stats, NormParams, NormSpec, NormVariant, RunningStats, StatMode, DEFAULT_EPSILON,
    DEFAULT_MOMENTUM,
};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor};

/// Partition for a single-partition variant over a tensor of `shape`.
pub fn build_partition(variant: NormVariant, shape: [usize; 4]) -> Result<GroupPartition> {
    let kind = match variant {
        NormVariant::Batch => PartitionKind::Batch,
        NormVariant::Layer => PartitionKind::Layer,
        NormVariant::Group { groups } => PartitionKind::Group(groups),
        NormVariant::Instance => PartitionKind::Instance,
        NormVariant::Local { groups } => PartitionKind::Local(groups),
        NormVariant::Switch => {
            return Err(Error::invalid("SwitchNorm mixes three partitions; use switchnorm_forward"))
        }
    };
    GroupPartition::new(kind, shape)
}

/// Parameter set used by each sample: LocalNorm routes sample block `k` to set `k`,
/// everything else uses set 0.
pub(crate) fn sample_sets(partition: &GroupPartition, param_sets: usize) -> Result<Vec<usize>> {
    let n = partition.shape()[0];
    match partition.kind() {
        PartitionKind::Local(k) if param_sets == k => Ok((0..n).map(|i| i / (n / k)).collect()),
        _ if param_sets == 1 => Ok(vec![0; n]),
        kind => Err(Error::invalid(format!("{param_sets} parameter sets cannot be routed over {kind:?}"))),
    }
}

/// Tape-free normalization of `x`.
///
/// In `Dynamic` mode the statistics come from `x` under `partition`; in `Frozen`
/// mode from `running`, which must have been populated. SwitchNorm uses the
/// softmax of the logits in `params` as mixture weights.
pub fn normalize<T: Real>(
    x: &Tensor<T>,
    spec: &NormSpec,
    partition: &GroupPartition,
    params: &NormParams<T>,
    running: Option<&RunningStats<T>>,
) -> Result<Tensor<T>> {
    let shape = x.nhwc()?;
    spec.validate(shape[3])?;
    let mut tape = Tape::no_grad();
    let xv = tape.input(x.clone())?;
    let g = tape.input(params.gamma.clone())?;
    let b = tape.input(params.beta.clone())?;
    let frozen = match spec.stat_mode {
        StatMode::Frozen => {
            let r = running
                .filter(|r| r.initialized)
                .ok_or_else(|| Error::UninitializedStats(spec.variant.label()))?;
            Some(r)
        }
        StatMode::Dynamic => None,
    };
    let out = match (spec.variant, frozen) {
        (NormVariant::Switch, _) => {
            let (ml, vl) = switch_logits(params)?;
            let ml = tape.input(ml)?;
            let vl = tape.input(vl)?;
            let frozen = frozen.map(|r| (r.mean.as_slice(), r.var.as_slice()));
            tape.normalize_switch(xv, g, b, ml, vl, partition.clone(), frozen, spec.epsilon)?.0
        }
        (_, Some(r)) => tape.normalize_frozen(xv, g, b, &r.mean, &r.var, &vec![0; shape[0]], spec.epsilon)?,
        (_, None) => {
            let sets = sample_sets(partition, params.param_sets())?;
            tape.normalize(xv, g, b, partition.clone(), &sets, spec.epsilon)?.0
        }
    };
    Ok(tape.value(out)?.clone())
}

fn switch_logits<T: Real>(params: &NormParams<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    match (&params.mean_logits, &params.var_logits) {
        (Some(m), Some(v)) => Ok((m.clone(), v.clone())),
        _ => Err(Error::invalid("SwitchNorm parameters carry no mixture logits")),
    }
}

/// SwitchNorm with explicit mixture weights over (batch, layer, instance)
/// statistics. Both weight triples must lie on the simplex.
pub fn switchnorm_forward<T: Real>(
    x: &Tensor<T>,
    weights_mean: [f64; 3],
    weights_var: [f64; 3],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let shape = x.nhwc()?;
    let comps = crate::tensor::switch_components(x, shape, GroupPartition::new(PartitionKind::Batch, shape)?, None)?;
    let out = engine::switch_forward(x.data(), shape, &comps, &weights_mean, &weights_var, gamma.data(), beta.data(), eps)?;
    Tensor::new(x.shape(), out.y)
}

/// LocalNorm over a training batch: `K` contiguous sample blocks, each with its
/// own statistics and its own `(gamma_k, beta_k)`. Returns the output and the
/// per-group `(mean, var)` in group order `k * C + c`.
pub fn localnorm_forward_train<T: Real>(
    x: &Tensor<T>,
    spec: &NormSpec,
    params: &NormParams<T>,
) -> Result<(Tensor<T>, Vec<(f64, f64)>)> {
    let NormVariant::Local { groups } = spec.variant else {
        return Err(Error::invalid(format!("expected a LocalNorm spec, got {}", spec.variant.label())));
    };
    let shape = x.nhwc()?;
    spec.validate(shape[3])?;
    if params.param_sets() != groups {
        return Err(Error::shape("localnorm", format!("{} parameter sets for K={groups}", params.param_sets())));
    }
    let partition = GroupPartition::new(PartitionKind::Local(groups), shape)?;
    let sets = sample_sets(&partition, groups)?;
    let mut tape = Tape::no_grad();
    let xv = tape.input(x.clone())?;
    let g = tape.input(params.gamma.clone())?;
    let b = tape.input(params.beta.clone())?;
    let (out, stats) = tape.normalize(xv, g, b, partition, &sets, spec.epsilon)?;
    Ok((tape.value(out)?.clone(), stats))
}
