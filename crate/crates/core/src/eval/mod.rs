//! Test-time evaluation strategies.
//!
//! | mode           | statistics from                          | parameter sets     |
//! |----------------|------------------------------------------|--------------------|
//! | Single         | one image                                | one random set     |
//! | SingleVoting   | one image                                | all sets, vote     |
//! | Voting         | a group-sized image set                  | all sets, vote     |
//! | Batch          | each block of a full batch               | block `k` -> set `k` |
//! | FrozenBN       | running averages                         | the single set     |
//!
//! The DynamicBN modes are Single and Batch applied to a BatchNorm model.
//! Rot90 fill pads the single-image group with rotated copies that only
//! contribute statistics.

mod confusion;

pub use confusion::ConfusionMatrix;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{scale_pixels, Model, Routing, Stats};
use crate::noise::NoiseSpec;
use crate::norm::{NormSpec, NormVariant, StatMode};
use crate::tensor::{rot90, Real, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalKind {
    Single,
    SingleVoting,
    Voting,
    Batch,
    FrozenBn,
    DynamicBnSingle,
    DynamicBnBatch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    #[default]
    None,
    Rot90Fill,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvalMode {
    pub kind: EvalKind,
    #[serde(default)]
    pub augmentation: Augmentation,
}

impl EvalMode {
    pub fn new(kind: EvalKind) -> Self {
        EvalMode { kind, augmentation: Augmentation::None }
    }

    pub fn rot90(kind: EvalKind) -> Self {
        EvalMode { kind, augmentation: Augmentation::Rot90Fill }
    }

    pub fn label(&self) -> String {
        let base = match self.kind {
            EvalKind::Single => "single",
            EvalKind::SingleVoting => "single_voting",
            EvalKind::Voting => "voting",
            EvalKind::Batch => "batch",
            EvalKind::FrozenBn => "frozen_bn",
            EvalKind::DynamicBnSingle => "dynamic_bn_single",
            EvalKind::DynamicBnBatch => "dynamic_bn_batch",
        };
        match self.augmentation {
            Augmentation::None => base.to_string(),
            Augmentation::Rot90Fill => format!("{base}_rot90"),
        }
    }

    /// Parses labels produced by [`EvalMode::label`].
    pub fn parse(s: &str) -> Result<Self> {
        let (base, augmentation) = match s.strip_suffix("_rot90") {
            Some(b) => (b, Augmentation::Rot90Fill),
            None => (s, Augmentation::None),
        };
        let kind = match base {
            "single" => EvalKind::Single,
            "single_voting" => EvalKind::SingleVoting,
            "voting" => EvalKind::Voting,
            "batch" => EvalKind::Batch,
            "frozen_bn" => EvalKind::FrozenBn,
            "dynamic_bn_single" => EvalKind::DynamicBnSingle,
            "dynamic_bn_batch" => EvalKind::DynamicBnBatch,
            _ => return Err(Error::invalid(format!("unknown evaluation mode {s:?}"))),
        };
        let mode = EvalMode { kind, augmentation };
        if augmentation == Augmentation::Rot90Fill && !mode.is_single() {
            return Err(Error::invalid(format!("rot90 fill applies to single-image modes, not {base}")));
        }
        Ok(mode)
    }

    /// Fails if a model normalized by `spec` cannot be evaluated in this mode.
    pub fn check_spec(&self, spec: &NormSpec) -> Result<()> {
        let variant = spec.variant;
        match self.kind {
            EvalKind::FrozenBn if spec.stat_mode != StatMode::Frozen => {
                Err(Error::invalid(format!("{} keeps no running statistics", variant.label())))
            }
            EvalKind::DynamicBnSingle | EvalKind::DynamicBnBatch if variant != NormVariant::Batch => {
                Err(Error::invalid(format!("dynamic BN modes need a BatchNorm model, got {}", variant.label())))
            }
            EvalKind::FrozenBn => Ok(()),
            _ if variant == NormVariant::Switch => Err(Error::invalid("SwitchNorm is evaluated with frozen statistics")),
            _ if self.augmentation == Augmentation::Rot90Fill && !self.is_single() => {
                Err(Error::invalid("rot90 fill applies to single-image modes"))
            }
            _ => Ok(()),
        }
    }

    fn is_single(&self) -> bool {
        matches!(self.kind, EvalKind::Single | EvalKind::SingleVoting | EvalKind::DynamicBnSingle)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Full test batch; its `K`-th part is the group size.
    pub batch_size: usize,
    /// Majority vote over per-set argmaxes instead of summed probabilities.
    #[serde(default)]
    pub hard_voting: bool,
    /// Evaluate even when a statistic group holds a single value.
    #[serde(default)]
    pub allow_degenerate: bool,
    /// Seeds the per-image random group choice of Single mode.
    #[serde(default)]
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { batch_size: 100, hard_voting: false, allow_degenerate: false, seed: 0 }
    }
}

impl EvalOptions {
    fn group_size<T: Real>(&self, model: &Model<T>) -> Result<usize> {
        let k = model.param_sets();
        if self.batch_size == 0 || self.batch_size % k != 0 {
            return Err(Error::IndivisibleGroups(format!("K={k} does not divide batch {}", self.batch_size)));
        }
        Ok(self.batch_size / k)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Sums probability rows (one per parameter set) and takes the argmax.
pub fn soft_vote(rows: &[Vec<f64>]) -> Result<usize> {
    let first = rows.first().ok_or_else(|| Error::invalid("vote over no ballots"))?;
    let mut total = vec![0.0; first.len()];
    for r in rows {
        if r.len() != total.len() {
            return Err(Error::shape("soft_vote", "ballots differ in length"));
        }
        total.iter_mut().zip(r).for_each(|(t, v)| *t += v);
    }
    Ok(argmax(&total))
}

/// Majority over per-row argmaxes; ties go to the lowest class.
pub fn hard_vote(rows: &[Vec<f64>]) -> Result<usize> {
    let first = rows.first().ok_or_else(|| Error::invalid("vote over no ballots"))?;
    let mut counts = vec![0.0; first.len()];
    for r in rows {
        counts[argmax(r)] += 1.0;
    }
    Ok(argmax(&counts))
}

fn vote(rows: &[Vec<f64>], opts: &EvalOptions) -> Result<usize> {
    if opts.hard_voting {
        hard_vote(rows)
    } else {
        soft_vote(rows)
    }
}

fn rows<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let m = t.shape()[1];
    t.data().chunks(m).map(|r| r.iter().map(|v| v.f64()).collect()).collect()
}

fn dynamic(r: Routing, opts: &EvalOptions) -> Stats {
    Stats::Dynamic(r.allowing_degenerate(opts.allow_degenerate))
}

fn check_single(image: &Tensor<impl Real>) -> Result<()> {
    if image.rank() != 4 || image.shape()[0] != 1 {
        return Err(Error::shape("single-image eval", format!("expected [1, H, W, C], got {:?}", image.shape())));
    }
    Ok(())
}

fn check_dynamic<T: Real>(model: &Model<T>) -> Result<()> {
    if model.norm_spec().variant == NormVariant::Switch {
        return Err(Error::invalid("SwitchNorm is evaluated with frozen statistics"));
    }
    Ok(())
}

/// Copies `x` `times` times along the batch axis.
fn tile<T: Real>(x: &Tensor<T>, times: usize) -> Result<Tensor<T>> {
    let parts: Vec<&Tensor<T>> = std::iter::repeat(x).take(times).collect();
    Tensor::concat_batch(&parts)
}

/// Single: statistics from this image alone (per channel over H, W), through a
/// uniformly chosen parameter set.
pub fn eval_single<T: Real>(model: &Model<T>, image: &Tensor<T>, rng: &mut Rng, opts: &EvalOptions) -> Result<usize> {
    check_single(image)?;
    check_dynamic(model)?;
    let g = rng.below(model.param_sets());
    let p = model.predict_proba(image, &dynamic(Routing::uniform(1, g), opts))?;
    Ok(argmax(&rows(&p)[0]))
}

/// Single-Voting: the image through every parameter set, statistics from the
/// image alone each time, then a vote.
pub fn eval_single_voting<T: Real>(model: &Model<T>, image: &Tensor<T>, opts: &EvalOptions) -> Result<usize> {
    check_single(image)?;
    check_dynamic(model)?;
    let k = model.param_sets();
    let x = tile(image, k)?;
    let p = model.predict_proba(&x, &dynamic(Routing::blocks(k, k, k)?, opts))?;
    vote(&rows(&p), opts)
}

/// Batch: block `k` of the batch is normalized with its own statistics and
/// parameter set `k`.
pub fn eval_batch<T: Real>(model: &Model<T>, images: &Tensor<T>, opts: &EvalOptions) -> Result<Vec<usize>> {
    check_dynamic(model)?;
    let n = images.shape()[0];
    let k = model.param_sets();
    let p = model.predict_proba(images, &dynamic(Routing::blocks(n, k, k)?, opts))?;
    Ok(rows(&p).iter().map(|r| argmax(r)).collect())
}

/// Voting: a group-sized set goes through every parameter set, statistics from
/// the set each time; each image's prediction is a vote across sets.
pub fn eval_voting<T: Real>(model: &Model<T>, images: &Tensor<T>, opts: &EvalOptions) -> Result<Vec<usize>> {
    check_dynamic(model)?;
    let g = opts.group_size(model)?;
    let n = images.shape()[0];
    if n != g {
        return Err(Error::shape("eval_voting", format!("{n} images for group size {g}")));
    }
    let k = model.param_sets();
    let x = tile(images, k)?;
    let p = rows(&model.predict_proba(&x, &dynamic(Routing::blocks(k * g, k, k)?, opts))?);
    (0..g)
        .map(|i| {
            let ballots: Vec<Vec<f64>> = (0..k).map(|s| p[s * g + i].clone()).collect();
            vote(&ballots, opts)
        })
        .collect()
}

/// FrozenBN: running statistics; each image's prediction ignores the others.
pub fn eval_frozen<T: Real>(model: &Model<T>, images: &Tensor<T>) -> Result<Vec<usize>> {
    let p = model.predict_proba(images, &Stats::Frozen)?;
    Ok(rows(&p).iter().map(|r| argmax(r)).collect())
}

/// `group_size` images cycling through the original and its 90, 180 and 270
/// degree rotations. Requires square images.
pub fn rot90_fill<T: Real>(image: &Tensor<T>, group_size: usize) -> Result<Tensor<T>> {
    check_single(image)?;
    let s = image.shape();
    if s[1] != s[2] {
        return Err(Error::shape("rot90_fill", format!("rotation needs square images, got {}x{}", s[1], s[2])));
    }
    if group_size == 0 {
        return Err(Error::invalid("rot90 fill into an empty group"));
    }
    let rots: Vec<Tensor<T>> = (0..4).map(|k| rot90(image, k)).collect::<Result<_>>()?;
    let parts: Vec<&Tensor<T>> = (0..group_size).map(|i| &rots[i % 4]).collect();
    Tensor::concat_batch(&parts)
}

/// Single or Single-Voting with the group filled by rotated copies; the
/// prediction is read from the original image only.
pub fn eval_rot90<T: Real>(
    model: &Model<T>,
    image: &Tensor<T>,
    voting: bool,
    rng: &mut Rng,
    opts: &EvalOptions,
) -> Result<usize> {
    check_dynamic(model)?;
    let g = opts.group_size(model)?;
    let filled = rot90_fill(image, g)?;
    let k = model.param_sets();
    if voting {
        let x = tile(&filled, k)?;
        let p = rows(&model.predict_proba(&x, &dynamic(Routing::blocks(k * g, k, k)?, opts))?);
        let ballots: Vec<Vec<f64>> = (0..k).map(|s| p[s * g].clone()).collect();
        vote(&ballots, opts)
    } else {
        let set = rng.below(k);
        let p = model.predict_proba(&filled, &dynamic(Routing::uniform(g, set), opts))?;
        Ok(argmax(&rows(&p)[0]))
    }
}

/// Result of evaluating a dataset under one mode.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

fn check_mode<T: Real>(model: &Model<T>, mode: &EvalMode) -> Result<()> {
    mode.check_spec(model.norm_spec())
}

/// Predictions for every image of `ds` (optionally degraded by `noise` first).
///
/// Batched modes pad the final partial chunk by wrapping around to the start of
/// the dataset; padded predictions are discarded. Single-image modes draw the
/// parameter set of image `i` from `Rng::derive(opts.seed, i)`.
pub fn predict_dataset<T: Real>(
    model: &Model<T>,
    ds: &Dataset,
    mode: &EvalMode,
    noise: Option<&NoiseSpec>,
    opts: &EvalOptions,
) -> Result<Vec<usize>> {
    check_mode(model, mode)?;
    if ds.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let degraded;
    let ds = match noise {
        Some(spec) => {
            degraded = ds.with_noise(spec)?;
            &degraded
        }
        None => ds,
    };
    let n = ds.len();
    if mode.is_single() {
        let preds: Vec<Result<usize>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let image = scale_pixels::<T>(&ds.images.slice_batch(i, 1)?);
                let mut rng = Rng::derive(opts.seed, i as u64);
                let voting = mode.kind == EvalKind::SingleVoting;
                match mode.augmentation {
                    Augmentation::Rot90Fill => eval_rot90(model, &image, voting, &mut rng, opts),
                    Augmentation::None if voting => eval_single_voting(model, &image, opts),
                    Augmentation::None => eval_single(model, &image, &mut rng, opts),
                }
            })
            .collect();
        return preds.into_iter().collect();
    }
    let chunk = match mode.kind {
        EvalKind::Voting => opts.group_size(model)?,
        _ => opts.batch_size,
    };
    if chunk == 0 {
        return Err(Error::invalid("evaluation batch size must be positive"));
    }
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let parts: Vec<Result<Vec<usize>>> = starts
        .into_par_iter()
        .map(|start| {
            let idx: Vec<usize> = (start..start + chunk).map(|i| i % n).collect();
            let x = scale_pixels::<T>(&ds.images.gather_batch(&idx)?);
            let mut preds = match mode.kind {
                EvalKind::FrozenBn => eval_frozen(model, &x)?,
                EvalKind::Voting => eval_voting(model, &x, opts)?,
                _ => eval_batch(model, &x, opts)?,
            };
            preds.truncate(n.min(start + chunk) - start);
            Ok(preds)
        })
        .collect();
    Ok(parts.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

/// Accuracy and confusion matrix of `model` on `ds` under `mode`.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    ds: &Dataset,
    mode: &EvalMode,
    noise: Option<&NoiseSpec>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let preds = predict_dataset(model, ds, mode, noise, opts)?;
    let confusion = ConfusionMatrix::from_predictions(ds.classes, &ds.labels, &preds)?;
    Ok(EvalReport { mode: *mode, accuracy: confusion.accuracy(), confusion })
}

/// The mode a model is routinely evaluated in: FrozenBN for variants trained
/// with running statistics, Batch otherwise.
pub fn default_mode<T: Real>(model: &Model<T>) -> EvalMode {
    match model.norm_spec().stat_mode {
        StatMode::Frozen => EvalMode::new(EvalKind::FrozenBn),
        StatMode::Dynamic => EvalMode::new(EvalKind::Batch),
    }
}

/// Clean accuracy under [`default_mode`].
pub fn accuracy_default<T: Real>(model: &Model<T>, ds: &Dataset, batch_size: usize) -> Result<f64> {
    let opts = EvalOptions { batch_size, ..EvalOptions::default() };
    Ok(evaluate(model, ds, &default_mode(model), None, &opts)?.accuracy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn votes_break_ties_low() {
        let rows = vec![vec![0.6, 0.4], vec![0.4, 0.6]];
        assert_eq!(soft_vote(&rows).unwrap(), 0);
        assert_eq!(hard_vote(&rows).unwrap(), 0);
        let rows = vec![vec![0.9, 0.1], vec![0.3, 0.7], vec![0.45, 0.55]];
        assert_eq!(soft_vote(&rows).unwrap(), 0);
        assert_eq!(hard_vote(&rows).unwrap(), 1);
        assert_eq!(soft_vote(&[vec![0.2, 0.8]]).unwrap(), argmax(&[0.2, 0.8]));
    }

    #[test]
    fn fill_tiles_rotations() {
        let img = Tensor::<f64>::from_fn(&[1, 3, 3, 1], |i| i as f64);
        let f = rot90_fill(&img, 4).unwrap();
        for k in 0..4 {
            assert_eq!(f.slice_batch(k, 1).unwrap(), rot90(&img, k).unwrap());
        }
        let f = rot90_fill(&img, 6).unwrap();
        assert_eq!(f.slice_batch(5, 1).unwrap(), rot90(&img, 1).unwrap());
        assert!(rot90_fill(&Tensor::<f64>::zeros(&[1, 2, 3, 1]), 4).is_err());
    }

    #[test]
    fn mode_labels_round_trip() {
        for kind in [
            EvalKind::Single,
            EvalKind::SingleVoting,
            EvalKind::Voting,
            EvalKind::Batch,
            EvalKind::FrozenBn,
            EvalKind::DynamicBnSingle,
            EvalKind::DynamicBnBatch,
        ] {
            let m = EvalMode::new(kind);
            assert_eq!(EvalMode::parse(&m.label()).unwrap(), m);
        }
        assert_eq!(EvalMode::parse("single_voting_rot90").unwrap(), EvalMode::rot90(EvalKind::SingleVoting));
        assert!(EvalMode::parse("batch_rot90").is_err());
        assert!(EvalMode::parse("bogus").is_err());
    }
}
