//! Experiment runner behind the `localnorm` binary.
//!
//! Every command reads an [`ExperimentConfig`], writes into one output
//! directory and refuses to replace existing files unless forced. Each CSV
//! starts with a comment row `# config_sha256=<hex> version=<crate version>`.
//!
//! | file | columns |
//! |---|---|
//! | `metrics.csv` | `epoch,split,metric,value` |
//! | `scaling_trace.csv` | `epoch,layer,param,group_mean,group_var` |
//! | `timing.csv` | `run,epoch,seconds` (wall clock, not reproducible) |
//! | `results.csv` | `mode,noise_family,sigma_n,accuracy` |
//! | `confusion/<mode>_<family>_<sigma>.csv` | `true\pred` grid |
//! | `sweep.csv` | `k,mode,noise_family,sigma_n,accuracy` |
//! | `histogram.csv` | `noise_family,sigma_n,channel,bin,count` |
//! | `channel_stats.csv` | `noise_family,sigma_n,stage,channel,mean,std` |
//! | `transfer.csv` | `stage,mode,accuracy` |

mod config;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub use config::{
    Arch, AugmentConfig, DataConfig, DataSource, EvalSection, ExperimentConfig, HistogramSection, ModelSection,
    NoiseSection, NormConfig, SweepSection, SyntheticConfig, TrainSection, TransferSection,
};

use crate::data::{load_idx_images, make_noisy_trainset, Dataset};
use crate::error::{Error, Result};
use crate::eval::{accuracy_default, default_mode, evaluate, EvalMode};
use crate::model::{load_checkpoint, save_checkpoint, train, Checkpoint, Model, TrainLog};
use crate::noise::{apply_noise_batch, apply_noise_with, channel_histogram, channel_stats, NoiseSpec};
use crate::norm::{NormSpec, NormVariant};
use crate::tensor::{Rng, Tensor};

/// Output directory with overwrite protection and the provenance header.
#[derive(Clone, Debug)]
pub struct OutputDir {
    root: PathBuf,
    force: bool,
    header: String,
}

impl OutputDir {
    pub fn create(root: impl Into<PathBuf>, force: bool, cfg: &ExperimentConfig) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let header = format!("# config_sha256={} version={}\n", cfg.hash()?, crate::VERSION);
        Ok(OutputDir { root, force, header })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn header(&self) -> &str {
        &self.header
    }

    /// Fails if any of `names` exists and overwriting was not requested.
    pub fn claim(&self, names: &[&str]) -> Result<()> {
        if self.force {
            return Ok(());
        }
        for name in names {
            let p = self.path(name);
            if p.exists() {
                return Err(Error::Config(format!("{} already exists; pass --force to overwrite", p.display())));
            }
        }
        Ok(())
    }

    /// Writes `body` below the header comment row.
    pub fn write_csv(&self, name: &str, body: &str) -> Result<PathBuf> {
        self.write_raw(name, format!("{}{body}", self.header).as_bytes())
    }

    pub fn write_raw(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(name);
        if !self.force && p.exists() {
            return Err(Error::Config(format!("{} already exists; pass --force to overwrite", p.display())));
        }
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    /// Echoes the resolved config as `config.toml`.
    pub fn write_config(&self, cfg: &ExperimentConfig) -> Result<PathBuf> {
        self.write_raw("config.toml", format!("{}{}", self.header, cfg.to_toml()?).as_bytes())
    }
}

/// `epoch,split,metric,value` rows for a training log, without the header comment.
pub fn metrics_csv(log: &TrainLog) -> String {
    let mut s = String::from("epoch,split,metric,value\n");
    for m in &log.metrics {
        let _ = writeln!(s, "{},train,lr,{}", m.epoch, m.lr);
        let _ = writeln!(s, "{},train,loss,{}", m.epoch, m.train_loss);
        let _ = writeln!(s, "{},train,accuracy,{}", m.epoch, m.train_accuracy);
        if let Some(a) = m.test_accuracy {
            let _ = writeln!(s, "{},test,accuracy,{a}", m.epoch);
        }
    }
    s
}

pub fn scaling_trace_csv(log: &TrainLog) -> String {
    let mut s = String::from("epoch,layer,param,group_mean,group_var\n");
    for t in &log.trace {
        let _ = writeln!(s, "{},{},{},{},{}", t.epoch, t.layer, t.param, t.group_mean, t.group_var);
    }
    s
}

fn timing_rows(s: &mut String, run: &str, log: &TrainLog) {
    for (i, secs) in log.epoch_seconds.iter().enumerate() {
        let _ = writeln!(s, "{run},{},{secs:.3}", i + 1);
    }
}

fn sigma_label(sigma: f64) -> String {
    format!("{sigma}").replace('.', "p")
}

/// Outcome of [`cmd_train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: TrainLog,
    pub train: Dataset,
    pub test: Dataset,
}

/// Builds the training set, adding noisy copies when augmentation is configured.
pub fn training_set(cfg: &ExperimentConfig, train: &Dataset) -> Result<Dataset> {
    match &cfg.train.augment {
        None => Ok(train.clone()),
        Some(a) => {
            let mut rng = Rng::derive(cfg.seed, 2);
            let noise = NoiseSpec { family: a.family, sigma: a.sigma, apn_variant: cfg.noise.apn_variant, seed: rng.next_u64() };
            make_noisy_trainset(train, &noise, a.fraction, &mut rng)
        }
    }
}

/// Trains the configured model without touching the filesystem; `test` is
/// scored after every epoch.
pub fn run_training(cfg: &ExperimentConfig, norm: NormSpec, train_ds: &Dataset, test: &Dataset) -> Result<(Model<f32>, TrainLog)> {
    let model_cfg = cfg.model_config(train_ds.image_shape(), train_ds.classes, norm);
    let mut model = Model::<f32>::new(model_cfg, &mut Rng::derive(cfg.seed, 0))?;
    let augmented = training_set(cfg, train_ds)?;
    let log = train(&mut model, &augmented, Some(test), &cfg.train_config())?;
    Ok((model, log))
}

/// Trains and writes `model.lnck`, `metrics.csv`, `scaling_trace.csv`,
/// `timing.csv` and `config.toml`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &OutputDir) -> Result<TrainOutcome> {
    cfg.validate()?;
    out.claim(&["config.toml", "model.lnck", "metrics.csv", "scaling_trace.csv", "timing.csv"])?;
    out.write_config(cfg)?;
    let (train_ds, test) = cfg.load_data()?;
    let test = eval_subset(cfg, test)?;
    let (model, log) = run_training(cfg, cfg.norm_spec(), &train_ds, &test)?;
    save_checkpoint(&out.path("model.lnck"), &Checkpoint::new(model.clone(), cfg.train.epochs, Some(log.rng.clone())))?;
    out.write_csv("metrics.csv", &metrics_csv(&log))?;
    out.write_csv("scaling_trace.csv", &scaling_trace_csv(&log))?;
    let mut timing = String::from("run,epoch,seconds\n");
    timing_rows(&mut timing, &cfg.norm_spec().variant.label(), &log);
    out.write_csv("timing.csv", &timing)?;
    Ok(TrainOutcome { model, log, train: train_ds, test })
}

/// One row of a results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub mode: String,
    pub family: String,
    pub sigma: f64,
    pub accuracy: f64,
}

/// Accuracy of `model` for every (mode, noise cell) pair. Sigma-0 cells are
/// evaluated once per mode and shared across families.
pub fn noise_sweep(
    model: &Model<f32>,
    test: &Dataset,
    modes: &[EvalMode],
    cfg: &ExperimentConfig,
    mut confusion: Option<&mut Vec<(String, String)>>,
) -> Result<Vec<ResultRow>> {
    let opts = cfg.eval_options();
    let mut rows = Vec::new();
    for mode in modes {
        let mut clean: Option<(f64, String)> = None;
        for cell in cfg.noise.cells() {
            let (accuracy, grid) = match (&clean, cell.sigma == 0.0) {
                (Some((a, g)), true) => (*a, g.clone()),
                _ => {
                    let noise = (cell.sigma > 0.0).then_some(&cell);
                    let r = evaluate(model, test, mode, noise, &opts)?;
                    let g = r.confusion.to_csv();
                    if cell.sigma == 0.0 {
                        clean = Some((r.accuracy, g.clone()));
                    }
                    (r.accuracy, g)
                }
            };
            if let Some(c) = confusion.as_deref_mut() {
                let name = format!("confusion/{}_{}_{}.csv", mode.label(), cell.family.label(), sigma_label(cell.sigma));
                c.push((name, grid));
            }
            rows.push(ResultRow { mode: mode.label(), family: cell.family.label().into(), sigma: cell.sigma, accuracy });
        }
    }
    Ok(rows)
}

fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = String::from("mode,noise_family,sigma_n,accuracy\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.mode, r.family, r.sigma, r.accuracy);
    }
    s
}

fn eval_subset(cfg: &ExperimentConfig, test: Dataset) -> Result<Dataset> {
    match cfg.eval.limit {
        Some(n) => test.limit(n),
        None => Ok(test),
    }
}

/// Evaluates a checkpoint over the noise sweep; writes `results.csv` and,
/// when enabled, one confusion matrix per cell.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, out: &OutputDir) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    out.claim(&["config.toml", "results.csv"])?;
    let model = load_checkpoint::<f32>(checkpoint)?.model;
    let (_, test) = cfg.load_data()?;
    let test = eval_subset(cfg, test)?;
    let modes = cfg.eval_modes()?;
    out.write_config(cfg)?;
    let mut grids = Vec::new();
    let rows = noise_sweep(&model, &test, &modes, cfg, cfg.eval.confusion.then_some(&mut grids))?;
    out.write_csv("results.csv", &results_csv(&rows))?;
    for (name, grid) in grids {
        out.write_csv(&name, &grid)?;
    }
    Ok(rows)
}

/// Trains one LocalNorm model per K (same seed and batches) and evaluates the
/// noise sweep for each; writes `sweep.csv` and `timing.csv`.
pub fn cmd_sweep_groups(cfg: &ExperimentConfig, out: &OutputDir) -> Result<Vec<(usize, ResultRow)>> {
    cfg.validate()?;
    let groups = cfg.sweep.as_ref().map(|s| s.groups.clone()).ok_or_else(|| Error::Config("missing [sweep] table".into()))?;
    out.claim(&["config.toml", "sweep.csv", "timing.csv"])?;
    out.write_config(cfg)?;
    let (train_ds, test) = cfg.load_data()?;
    let test = eval_subset(cfg, test)?;
    let modes = cfg.eval_modes()?;
    let base = cfg.norm_spec();
    let mut all = Vec::new();
    let mut timing = String::from("run,epoch,seconds\n");
    for &k in &groups {
        let norm = NormSpec::new(NormVariant::Local { groups: k });
        let norm = NormSpec { epsilon: base.epsilon, momentum: base.momentum, ..norm };
        let (model, log) = run_training(cfg, norm, &train_ds, &test)?;
        timing_rows(&mut timing, &format!("k{k}"), &log);
        for row in noise_sweep(&model, &test, &modes, cfg, None)? {
            all.push((k, row));
        }
    }
    let mut s = String::from("k,mode,noise_family,sigma_n,accuracy\n");
    for (k, r) in &all {
        let _ = writeln!(s, "{k},{},{},{},{}", r.mode, r.family, r.sigma, r.accuracy);
    }
    out.write_csv("sweep.csv", &s)?;
    out.write_csv("timing.csv", &timing)?;
    Ok(all)
}

/// Per-channel histograms of noisy images for every noise cell. `image` may name
/// an IDX image file; otherwise the first test images are used.
pub fn cmd_histogram(cfg: &ExperimentConfig, image: Option<&Path>, out: &OutputDir) -> Result<()> {
    let h = cfg.histogram.clone().ok_or_else(|| Error::Config("missing [histogram] table".into()))?;
    let images = match image {
        Some(p) => {
            let t = load_idx_images(p)?;
            let n = h.images.min(t.shape()[0]);
            t.slice_batch(0, n)?
        }
        None => {
            cfg.validate()?;
            let (_, test) = cfg.load_data()?;
            test.images.slice_batch(0, h.images.min(test.len()))?
        }
    };
    out.claim(&["config.toml", "histogram.csv", "channel_stats.csv"])?;
    out.write_config(cfg)?;
    let mut hist = String::from("noise_family,sigma_n,channel,bin,count\n");
    let mut stats = String::from("noise_family,sigma_n,stage,channel,mean,std\n");
    for cell in cfg.noise.cells() {
        let noisy: Tensor<f32> = apply_noise_batch(&images, &cell)?;
        let hc = channel_histogram(&noisy, h.bins)?;
        for (c, counts) in hc.counts.iter().enumerate() {
            for (b, n) in counts.iter().enumerate() {
                let _ = writeln!(hist, "{},{},{c},{b},{n}", cell.family.label(), cell.sigma);
            }
        }
        let mut stages = vec![("clipped", hc.stats)];
        if h.pre_clip {
            stages.push(("raw", channel_stats(&raw_noise_batch(&images, &cell)?)?));
        }
        for (stage, st) in stages {
            for (c, (m, sd)) in st.iter().enumerate() {
                let _ = writeln!(stats, "{},{},{stage},{c},{m},{sd}", cell.family.label(), cell.sigma);
            }
        }
    }
    out.write_csv("histogram.csv", &hist)?;
    out.write_csv("channel_stats.csv", &stats)?;
    Ok(())
}

/// Same draws as [`apply_noise_batch`] without the final clip.
fn raw_noise_batch(images: &Tensor<f32>, spec: &NoiseSpec) -> Result<Tensor<f64>> {
    let x: Tensor<f64> = images.cast();
    let n = x.shape()[0];
    let parts: Vec<Tensor<f64>> = (0..n)
        .map(|i| apply_noise_with(&x.slice_batch(i, 1)?, spec, &mut Rng::derive(spec.seed, i as u64), false))
        .collect::<Result<_>>()?;
    Tensor::concat_batch(&parts.iter().collect::<Vec<_>>())
}

/// Before/after accuracies logged by [`cmd_transfer`].
#[derive(Clone, Debug)]
pub struct TransferOutcome {
    pub before: f64,
    pub after_transfer: f64,
    pub after_fine_tune: Option<f64>,
    pub model: Model<f32>,
}

/// Replaces every BatchNorm layer of a checkpoint with LocalNorm, optionally
/// fine-tunes, and writes `model.lnck` plus `transfer.csv`.
pub fn cmd_transfer(cfg: &ExperimentConfig, checkpoint: &Path, out: &OutputDir) -> Result<TransferOutcome> {
    cfg.validate()?;
    let t = cfg.transfer.clone().ok_or_else(|| Error::Config("missing [transfer] table".into()))?;
    out.claim(&["config.toml", "model.lnck", "transfer.csv"])?;
    let source = load_checkpoint::<f32>(checkpoint)?.model;
    let (train_ds, test) = cfg.load_data()?;
    let test = eval_subset(cfg, test)?;
    out.write_config(cfg)?;
    let batch = cfg.eval.batch_size;
    let before = accuracy_default(&source, &test, batch)?;
    let mut model = source.transfer_bn_to_local(t.groups, cfg.train.batch_size)?;
    let after_transfer = accuracy_default(&model, &test, batch)?;
    let mut rows = vec![
        ("source", default_mode(&source).label(), before),
        ("transferred", default_mode(&model).label(), after_transfer),
    ];
    let mut after_fine_tune = None;
    let mut epoch = 0;
    if t.fine_tune_epochs > 0 {
        let mut tc = cfg.train_config();
        tc.epochs = t.fine_tune_epochs;
        train(&mut model, &training_set(cfg, &train_ds)?, None, &tc)?;
        let a = accuracy_default(&model, &test, batch)?;
        rows.push(("fine_tuned", default_mode(&model).label(), a));
        after_fine_tune = Some(a);
        epoch = t.fine_tune_epochs;
    }
    save_checkpoint(&out.path("model.lnck"), &Checkpoint::new(model.clone(), epoch, None))?;
    let mut s = String::from("stage,mode,accuracy\n");
    for (stage, mode, acc) in rows {
        let _ = writeln!(s, "{stage},{mode},{acc}");
    }
    out.write_csv("transfer.csv", &s)?;
    Ok(TransferOutcome { before, after_transfer, after_fine_tune, model })
}

/// Groups result rows by `(mode, family)` for quick lookups.
pub fn index_rows(rows: &[ResultRow]) -> HashMap<(String, String), Vec<(f64, f64)>> {
    let mut m: HashMap<(String, String), Vec<(f64, f64)>> = HashMap::new();
    for r in rows {
        m.entry((r.mode.clone(), r.family.clone())).or_default().push((r.sigma, r.accuracy));
    }
    m
}
