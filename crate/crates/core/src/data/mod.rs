//! Labeled image datasets: IDX and CIFAR-10 binary parsers, a synthetic
//! generator, noise augmentation and epoch batching.

mod cifar;
mod idx;

pub use cifar::{load_cifar10_binary, parse_cifar10, write_cifar10};
pub use idx::{load_idx_images, load_idx_labels, load_idx_pair, parse_idx, write_idx_images, write_idx_labels, IdxArray};

use std::path::Path;

use crate::error::{Error, Result};
use crate::noise::{apply_noise_batch_from, NoiseSpec};
use crate::tensor::{Rng, Tensor};

/// Images `[N, H, W, C]` with raw pixel values in `[0, 255]`, plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
    /// Source files and transformations applied, in order.
    pub provenance: Vec<String>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: impl Into<String>) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::shape("Dataset", format!("images must be [N, H, W, C], got {shape:?}")));
        }
        if shape[0] != labels.len() {
            return Err(Error::shape("Dataset", format!("{} images but {} labels", shape[0], labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {classes})")));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=255.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 255]")));
        }
        Ok(Dataset { images, labels, classes, split: split.into(), provenance: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[H, W, C]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn with_note(mut self, note: String) -> Self {
        self.provenance.push(note);
        self
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let images = self.images.gather_batch(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let mut out = Dataset { images, labels, ..self.clone_meta() };
        out.provenance.push(format!("select {} samples", indices.len()));
        Ok(out)
    }

    /// The first `n` samples (all of them when `n >= len`).
    pub fn limit(&self, n: usize) -> Result<Dataset> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        let images = self.images.slice_batch(0, n)?;
        let labels = self.labels[..n].to_vec();
        Ok(Dataset { images, labels, ..self.clone_meta() }.with_note(format!("first {n} samples")))
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            images: Tensor::zeros(&[0]),
            labels: Vec::new(),
            classes: self.classes,
            split: self.split.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// The same samples under `noise`; image `i` uses the stream derived from `(seed, i)`.
    pub fn with_noise(&self, noise: &NoiseSpec) -> Result<Dataset> {
        let images = apply_noise_batch_from(&self.images, noise, 0)?;
        Ok(Dataset { images, labels: self.labels.clone(), ..self.clone_meta() }
            .with_note(format!("{} sigma={} seed={}", noise.family.label(), noise.sigma, noise.seed)))
    }
}

/// MNIST from a directory holding the four canonical IDX files.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx_pair(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"), 10, "train")?;
    let test = load_idx_pair(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"), 10, "test")?;
    Ok((train, test))
}

/// Linearly separable images: class `k` lights a distinct horizontal band with
/// jittered intensity over a dim noisy background.
pub fn synthetic_separable(n: usize, side: usize, classes: usize, rng: &mut Rng) -> Result<Dataset> {
    if classes < 2 || side < classes {
        return Err(Error::invalid(format!("need 2 <= classes <= side, got {classes} classes on {side} rows")));
    }
    let band = side / classes;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * side * side);
    for _ in 0..n {
        let k = rng.below(classes);
        labels.push(k);
        let level = rng.uniform(150.0, 255.0);
        for r in 0..side {
            for _ in 0..side {
                let lit = r / band == k && r < band * classes;
                let v = if lit { level } else { rng.uniform(0.0, 60.0) };
                data.push(v as f32);
            }
        }
    }
    let images = Tensor::new(&[n, side, side, 1], data)?;
    Ok(Dataset::new(images, labels, classes, "synthetic")?.with_note(format!("synthetic separable n={n} side={side}")))
}

/// Original samples plus `ceil(fraction * N)` noise-degraded copies of randomly
/// chosen originals, shuffled together.
pub fn make_noisy_trainset(ds: &Dataset, noise: &NoiseSpec, fraction: f64, rng: &mut Rng) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("augmentation fraction must lie in [0, 1], got {fraction}")));
    }
    noise.validate()?;
    if fraction == 0.0 {
        return Ok(ds.clone());
    }
    let extra = (fraction * ds.len() as f64).ceil() as usize;
    let mut pick: Vec<usize> = (0..ds.len()).collect();
    rng.shuffle(&mut pick);
    pick.truncate(extra);
    let chosen = ds.images.gather_batch(&pick)?;
    let noisy = apply_noise_batch_from(&chosen, noise, 0)?;
    let all = Tensor::concat_batch(&[&ds.images, &noisy])?;
    let mut labels = ds.labels.clone();
    labels.extend(pick.iter().map(|&i| ds.labels[i]));
    let mut order: Vec<usize> = (0..labels.len()).collect();
    rng.shuffle(&mut order);
    let images = all.gather_batch(&order)?;
    let labels = order.iter().map(|&i| labels[i]).collect();
    Ok(Dataset { images, labels, ..ds.clone_meta() }.with_note(format!(
        "augmented with {extra} {} sigma={} copies",
        noise.family.label(),
        noise.sigma
    )))
}

/// One training batch: dataset indices, split into `groups` contiguous blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub groups: usize,
}

impl Batch {
    /// Index block belonging to group `k`.
    pub fn group(&self, k: usize) -> &[usize] {
        let per = self.indices.len() / self.groups;
        &self.indices[k * per..(k + 1) * per]
    }
}

/// One epoch of shuffled batches of `batch_size`, each split into `groups`
/// blocks. The trailing partial batch is dropped.
pub fn batch_iterator(n: usize, batch_size: usize, groups: usize, rng: &mut Rng) -> Result<Vec<Batch>> {
    if batch_size == 0 || groups == 0 || batch_size % groups != 0 {
        return Err(Error::IndivisibleGroups(format!("K={groups} does not divide batch {batch_size}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    Ok(order
        .chunks_exact(batch_size)
        .map(|c| Batch { indices: c.to_vec(), groups })
        .collect())
}
