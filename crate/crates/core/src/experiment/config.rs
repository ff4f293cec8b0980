use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_cifar10_binary, load_mnist, synthetic_separable, Dataset};
use crate::error::{Error, Result};
use crate::eval::{EvalMode, EvalOptions};
use crate::model::{Block, ModelConfig, TrainConfig};
use crate::noise::{ApnVariant, NoiseFamily, NoiseSpec};
use crate::norm::{NormSpec, NormVariant, StatMode};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Mnist,
    Cifar10,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub train: usize,
    pub test: usize,
    pub side: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// MNIST: directory with the four IDX files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// CIFAR-10: binary batch files.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub train_files: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub test_files: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mnist,
    Small,
}

/// Norm choice as written in the config; unset fields take the variant's defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormConfig {
    #[serde(flatten)]
    pub variant: NormVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stat_mode: Option<StatMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
}

impl NormConfig {
    pub fn spec(&self) -> NormSpec {
        let base = NormSpec::new(self.variant);
        NormSpec {
            epsilon: self.epsilon.unwrap_or(base.epsilon),
            stat_mode: self.stat_mode.unwrap_or(base.stat_mode),
            momentum: self.momentum.unwrap_or(base.momentum),
            variant: self.variant,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Arch,
    /// Overrides the preset's hidden blocks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<Block>>,
    pub norm: NormConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub family: NoiseFamily,
    pub sigma: f64,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Mode labels such as `batch`, `voting`, `frozen_bn`, `single_voting_rot90`.
    pub modes: Vec<String>,
    pub batch_size: usize,
    #[serde(default)]
    pub hard_voting: bool,
    #[serde(default)]
    pub allow_degenerate: bool,
    /// Write one confusion matrix per (mode, family, sigma) cell.
    #[serde(default)]
    pub confusion: bool,
    /// Evaluate on the first `limit` test images only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub families: Vec<NoiseFamily>,
    pub sigmas: Vec<f64>,
    #[serde(default)]
    pub apn_variant: ApnVariant,
    pub seed: u64,
}

impl NoiseSection {
    /// Every (family, sigma) cell of the sweep. Sigmas beyond a family's valid
    /// range are skipped.
    pub fn cells(&self) -> Vec<NoiseSpec> {
        let mut out = Vec::new();
        for &family in &self.families {
            for &sigma in &self.sigmas {
                let spec = NoiseSpec { family, sigma, apn_variant: self.apn_variant, seed: self.seed };
                if spec.validate().is_ok() {
                    out.push(spec);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub groups: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramSection {
    pub bins: usize,
    /// Histogram the first `images` test images.
    pub images: usize,
    /// Record pre-clip statistics alongside the clipped ones.
    #[serde(default)]
    pub pre_clip: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    pub groups: usize,
    #[serde(default)]
    pub fine_tune_epochs: usize,
}

/// Complete, serializable description of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default = "one")]
    pub threads: usize,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub noise: NoiseSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<HistogramSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferSection>,
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    /// MNIST 10k-train subset, batch 100, LocalNorm with K = 10, 5 epochs.
    pub fn desk_mnist(dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            seed: 0,
            out: None,
            threads: 1,
            data: DataConfig {
                source: DataSource::Mnist,
                dir: Some(dir.into()),
                train_files: Vec::new(),
                test_files: Vec::new(),
                synthetic: None,
                train_limit: Some(10_000),
                test_limit: Some(10_000),
            },
            model: ModelSection {
                arch: Arch::Mnist,
                blocks: None,
                norm: NormConfig { variant: NormVariant::Local { groups: 10 }, epsilon: None, stat_mode: None, momentum: None },
            },
            train: TrainSection { epochs: 5, batch_size: 100, lr: 0.01, momentum: 0.9, augment: None },
            eval: EvalSection {
                modes: vec!["batch".into(), "voting".into()],
                batch_size: 100,
                hard_voting: false,
                allow_degenerate: false,
                confusion: false,
                limit: None,
            },
            noise: NoiseSection {
                families: vec![NoiseFamily::Agn, NoiseFamily::Apn, NoiseFamily::Mbn],
                sigmas: vec![0.0, 0.25, 0.5, 1.0, 2.0],
                apn_variant: ApnVariant::Additive,
                seed: 1,
            },
            sweep: Some(SweepSection { groups: vec![1, 2, 4, 5, 10] }),
            histogram: Some(HistogramSection { bins: 256, images: 100, pre_clip: true }),
            transfer: Some(TransferSection { groups: 10, fine_tune_epochs: 1 }),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn norm_spec(&self) -> NormSpec {
        self.model.norm.spec()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            momentum: self.train.momentum,
            seed: self.seed,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            batch_size: self.eval.batch_size,
            hard_voting: self.eval.hard_voting,
            allow_degenerate: self.eval.allow_degenerate,
            seed: self.seed,
        }
    }

    pub fn eval_modes(&self) -> Result<Vec<EvalMode>> {
        self.eval.modes.iter().map(|m| EvalMode::parse(m)).collect()
    }

    pub fn model_config(&self, input: [usize; 3], classes: usize, norm: NormSpec) -> ModelConfig {
        let mut cfg = match self.model.arch {
            Arch::Mnist => ModelConfig { input, classes, ..ModelConfig::mnist(norm) },
            Arch::Small => ModelConfig::small(input, classes, norm),
        };
        if let Some(blocks) = &self.model.blocks {
            cfg.blocks = blocks.clone();
        }
        cfg
    }

    /// Checks everything that can be checked before any work starts.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self.data.source {
            DataSource::Mnist => {
                let dir = self.data.dir.as_ref().ok_or_else(|| Error::Config("mnist source needs data.dir".into()))?;
                for f in ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"] {
                    if !dir.join(f).is_file() {
                        return bad(format!("missing MNIST file {}", dir.join(f).display()));
                    }
                }
            }
            DataSource::Cifar10 => {
                if self.data.train_files.is_empty() || self.data.test_files.is_empty() {
                    return bad("cifar10 source needs data.train_files and data.test_files".into());
                }
                for f in self.data.train_files.iter().chain(&self.data.test_files) {
                    if !f.is_file() {
                        return bad(format!("missing CIFAR-10 file {}", f.display()));
                    }
                }
            }
            DataSource::Synthetic => {
                if self.data.synthetic.is_none() {
                    return bad("synthetic source needs a [data.synthetic] table".into());
                }
            }
        }
        if self.threads == 0 {
            return bad("threads must be positive".into());
        }
        if self.noise.sigmas.is_empty() || self.noise.families.is_empty() {
            return bad("noise sweep needs at least one family and one sigma".into());
        }
        if let Some(s) = self.noise.sigmas.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
            return bad(format!("noise sigma {s} must be finite and >= 0"));
        }
        if self.noise.cells().is_empty() {
            return bad("no (family, sigma) cell of the noise sweep is valid".into());
        }
        if self.train.batch_size == 0 || !(self.train.lr > 0.0) || !(0.0..1.0).contains(&self.train.momentum) {
            return bad("train needs batch_size > 0, lr > 0 and momentum in [0, 1)".into());
        }
        let spec = self.norm_spec();
        let k = spec.variant.param_sets();
        if self.train.batch_size % k != 0 {
            return bad(format!("K={k} does not divide train.batch_size {}", self.train.batch_size));
        }
        if self.eval.batch_size == 0 || self.eval.batch_size % k != 0 {
            return bad(format!("K={k} does not divide eval.batch_size {}", self.eval.batch_size));
        }
        if let Some(a) = &self.train.augment {
            NoiseSpec::new(a.family, a.sigma, 0).validate()?;
            if !(0.0..=1.0).contains(&a.fraction) {
                return bad(format!("augment.fraction {} outside [0, 1]", a.fraction));
            }
        }
        for mode in self.eval_modes()? {
            mode.check_spec(&spec).map_err(|e| Error::Config(format!("eval mode {}: {e}", mode.label())))?;
        }
        if let Some(s) = &self.sweep {
            if s.groups.is_empty() {
                return bad("sweep.groups is empty".into());
            }
            if let Some(k) = s.groups.iter().find(|&&k| k == 0 || self.train.batch_size % k != 0 || self.eval.batch_size % k != 0) {
                return bad(format!("sweep K={k} does not divide the batch size"));
            }
        }
        if let Some(h) = &self.histogram {
            if h.bins == 0 || h.images == 0 {
                return bad("histogram needs bins > 0 and images > 0".into());
            }
        }
        if let Some(t) = &self.transfer {
            if t.groups == 0 || self.train.batch_size % t.groups != 0 {
                return bad(format!("transfer K={} does not divide train.batch_size", t.groups));
            }
        }
        Ok(())
    }

    /// Loads `(train, test)` with the configured limits applied.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.data.source {
            DataSource::Mnist => load_mnist(self.data.dir.as_deref().unwrap_or(Path::new("data/mnist")))?,
            DataSource::Cifar10 => (concat_files(&self.data.train_files, "train")?, concat_files(&self.data.test_files, "test")?),
            DataSource::Synthetic => {
                let s = self.data.synthetic.as_ref().ok_or_else(|| Error::Config("missing [data.synthetic]".into()))?;
                let mut rng = Rng::derive(self.seed, 7);
                let all = synthetic_separable(s.train + s.test, s.side, s.classes, &mut rng)?;
                let idx: Vec<usize> = (0..all.len()).collect();
                (all.select(&idx[..s.train])?, all.select(&idx[s.train..])?)
            }
        };
        let train = match self.data.train_limit {
            Some(n) => train.limit(n)?,
            None => train,
        };
        let test = match self.data.test_limit {
            Some(n) => test.limit(n)?,
            None => test,
        };
        Ok((train, test))
    }
}

fn concat_files(files: &[PathBuf], split: &str) -> Result<Dataset> {
    let parts: Vec<Dataset> = files.iter().map(|f| load_cifar10_binary(f)).collect::<Result<_>>()?;
    let images: Vec<&Tensor<f32>> = parts.iter().map(|d| &d.images).collect();
    let labels = parts.iter().flat_map(|d| d.labels.iter().copied()).collect();
    let mut ds = Dataset::new(Tensor::concat_batch(&images)?, labels, 10, split)?;
    ds.provenance = parts.into_iter().flat_map(|d| d.provenance).collect();
    Ok(ds)
}
