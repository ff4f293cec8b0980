//! Pixel-space degradation models and per-channel distribution summaries.
//!
//! Inputs are images in `[0, 255]`. Noisy outputs are clipped back to that range;
//! the `*_unclipped` variants expose the raw values for statistics.

use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Rng, Tensor};

pub const PIXEL_MAX: f64 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    /// Additive Gaussian: `x (1 + xi)`, `xi ~ N(0, sigma)`.
    Agn,
    /// Additive Poisson: `xi = k - sigma`, `k ~ Poisson(sigma)`.
    Apn,
    /// Multiplicative Bernoulli: each pixel removed with probability `sigma`.
    Mbn,
}

impl NoiseFamily {
    pub fn label(self) -> &'static str {
        match self {
            NoiseFamily::Agn => "agn",
            NoiseFamily::Apn => "apn",
            NoiseFamily::Mbn => "mbn",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApnVariant {
    /// `x + 255 xi`.
    #[default]
    Additive,
    /// `x (1 + xi)`.
    Multiplicative,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    pub sigma: f64,
    #[serde(default)]
    pub apn_variant: ApnVariant,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(family: NoiseFamily, sigma: f64, seed: u64) -> Self {
        NoiseSpec { family, sigma, apn_variant: ApnVariant::Additive, seed }
    }

    pub fn agn(sigma: f64, seed: u64) -> Self {
        Self::new(NoiseFamily::Agn, sigma, seed)
    }

    pub fn apn(sigma: f64, seed: u64) -> Self {
        Self::new(NoiseFamily::Apn, sigma, seed)
    }

    pub fn mbn(sigma: f64, seed: u64) -> Self {
        Self::new(NoiseFamily::Mbn, sigma, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("noise intensity must be finite and >= 0, got {}", self.sigma)));
        }
        if matches!(self.family, NoiseFamily::Apn | NoiseFamily::Mbn) && self.sigma > 1.0 {
            return Err(Error::invalid(format!("{} intensity must lie in [0, 1], got {}", self.family.label(), self.sigma)));
        }
        Ok(())
    }
}

fn clip<T: Real>(x: Tensor<T>) -> Tensor<T> {
    let (lo, hi) = (T::zero(), T::lit(PIXEL_MAX));
    x.map(|v| v.max(lo).min(hi))
}

/// `x (1 + xi)` with independent `xi ~ N(0, sigma)` per value, before clipping.
pub fn apply_agn_unclipped<T: Real>(x: &Tensor<T>, sigma: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    NoiseSpec::agn(sigma, 0).validate()?;
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    Ok(x.map(|v| v * T::lit(1.0 + sigma * rng.normal())))
}

pub fn apply_agn<T: Real>(x: &Tensor<T>, sigma: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    apply_agn_unclipped(x, sigma, rng).map(clip)
}

/// Poisson noise term `k - sigma`, before clipping.
pub fn apply_apn_unclipped<T: Real>(x: &Tensor<T>, sigma: f64, variant: ApnVariant, rng: &mut Rng) -> Result<Tensor<T>> {
    NoiseSpec::apn(sigma, 0).validate()?;
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let poisson = Poisson::new(sigma).map_err(|e| Error::invalid(format!("poisson rate {sigma}: {e}")))?;
    Ok(x.map(|v| {
        let xi = rng.sample(&poisson) - sigma;
        match variant {
            ApnVariant::Additive => v + T::lit(PIXEL_MAX * xi),
            ApnVariant::Multiplicative => v * T::lit(1.0 + xi),
        }
    }))
}

pub fn apply_apn<T: Real>(x: &Tensor<T>, sigma: f64, variant: ApnVariant, rng: &mut Rng) -> Result<Tensor<T>> {
    apply_apn_unclipped(x, sigma, variant, rng).map(clip)
}

/// Zeroes each pixel (all channels together) with probability `sigma`.
pub fn apply_mbn<T: Real>(x: &Tensor<T>, sigma: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    NoiseSpec::mbn(sigma, 0).validate()?;
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let c = *x.shape().last().ok_or_else(|| Error::shape("apply_mbn", "scalar input"))?;
    let mut out = x.clone();
    for pixel in out.data_mut().chunks_mut(c.max(1)) {
        if !rng.bernoulli(1.0 - sigma) {
            pixel.iter_mut().for_each(|v| *v = T::zero());
        }
    }
    Ok(clip(out))
}

/// Applies `spec` to `x`, clipped.
pub fn apply_noise<T: Real>(x: &Tensor<T>, spec: &NoiseSpec, rng: &mut Rng) -> Result<Tensor<T>> {
    apply_noise_with(x, spec, rng, true)
}

/// Applies `spec` to `x`, optionally without the final clip.
pub fn apply_noise_with<T: Real>(x: &Tensor<T>, spec: &NoiseSpec, rng: &mut Rng, clipped: bool) -> Result<Tensor<T>> {
    spec.validate()?;
    let raw = match spec.family {
        NoiseFamily::Agn => apply_agn_unclipped(x, spec.sigma, rng)?,
        NoiseFamily::Apn => apply_apn_unclipped(x, spec.sigma, spec.apn_variant, rng)?,
        NoiseFamily::Mbn => apply_mbn(x, spec.sigma, rng)?,
    };
    Ok(if clipped { clip(raw) } else { raw })
}

/// Applies `spec` to every image of a `[N, H, W, C]` batch, image `i` drawing from
/// the stream `Rng::derive(spec.seed, i)`. The result does not depend on how
/// the batch is later split.
pub fn apply_noise_batch<T: Real>(images: &Tensor<T>, spec: &NoiseSpec) -> Result<Tensor<T>> {
    apply_noise_batch_from(images, spec, 0)
}

/// As [`apply_noise_batch`], numbering images from `offset`.
pub fn apply_noise_batch_from<T: Real>(images: &Tensor<T>, spec: &NoiseSpec, offset: usize) -> Result<Tensor<T>> {
    spec.validate()?;
    let n = *images.shape().first().ok_or_else(|| Error::shape("apply_noise_batch", "scalar input"))?;
    if spec.sigma == 0.0 || n == 0 {
        return Ok(images.clone());
    }
    let per = images.numel() / n;
    let mut out = Vec::with_capacity(images.numel());
    let mut shape = images.shape().to_vec();
    shape[0] = 1;
    for (i, chunk) in images.data().chunks(per).enumerate() {
        let mut rng = Rng::derive(spec.seed, (offset + i) as u64);
        let img = Tensor::new(&shape, chunk.to_vec())?;
        out.extend(apply_noise(&img, spec, &mut rng)?.into_data());
    }
    Tensor::new(images.shape(), out)
}

/// Per-channel histogram over `[0, 256)` plus `(mean, std)` per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelHistogram {
    pub bins: usize,
    /// `counts[c][b]`.
    pub counts: Vec<Vec<u64>>,
    /// Population `(mean, std)` per channel.
    pub stats: Vec<(f64, f64)>,
}

/// Bins every value of each channel (last axis) into `bins` equal-width bins over
/// `[0, 256)`. Values must lie in `[0, 255]`.
pub fn channel_histogram<T: Real>(x: &Tensor<T>, bins: usize) -> Result<ChannelHistogram> {
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let c = *x.shape().last().ok_or_else(|| Error::shape("channel_histogram", "scalar input"))?;
    let mut counts = vec![vec![0u64; bins]; c];
    for (i, v) in x.data().iter().enumerate() {
        let v = v.f64();
        if !(0.0..=PIXEL_MAX).contains(&v) {
            return Err(Error::invalid(format!("histogram value {v} outside [0, 255]")));
        }
        let b = ((v * bins as f64 / 256.0) as usize).min(bins - 1);
        counts[i % c][b] += 1;
    }
    Ok(ChannelHistogram { bins, counts, stats: channel_stats(x)? })
}

/// Population `(mean, std)` of each channel (last axis).
pub fn channel_stats<T: Real>(x: &Tensor<T>) -> Result<Vec<(f64, f64)>> {
    let c = *x.shape().last().ok_or_else(|| Error::shape("channel_stats", "scalar input"))?;
    if c == 0 || x.numel() == 0 {
        return Err(Error::DegenerateGroup("channel statistics of an empty tensor".into()));
    }
    let m = (x.numel() / c) as f64;
    let mut sum = vec![0.0f64; c];
    for (i, v) in x.data().iter().enumerate() {
        sum[i % c] += v.f64();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
    let mut sq = vec![0.0f64; c];
    for (i, v) in x.data().iter().enumerate() {
        let d = v.f64() - mean[i % c];
        sq[i % c] += d * d;
    }
    Ok(mean.into_iter().zip(sq).map(|(mu, s)| (mu, (s / m).sqrt())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Tensor<f64> {
        Tensor::from_fn(&[2, 4, 4, 3], |i| (i * 7 % 256) as f64)
    }

    #[test]
    fn zero_intensity_is_identity() {
        let x = ramp();
        let mut rng = Rng::new(1);
        for family in [NoiseFamily::Agn, NoiseFamily::Apn, NoiseFamily::Mbn] {
            assert_eq!(apply_noise(&x, &NoiseSpec::new(family, 0.0, 0), &mut rng).unwrap(), x);
        }
        let spec = NoiseSpec { apn_variant: ApnVariant::Multiplicative, ..NoiseSpec::apn(0.0, 0) };
        assert_eq!(apply_noise(&x, &spec, &mut rng).unwrap(), x);
    }

    #[test]
    fn agn_keeps_black_images_black() {
        let x = Tensor::<f64>::zeros(&[1, 8, 8, 3]);
        assert_eq!(apply_agn(&x, 2.0, &mut Rng::new(5)).unwrap(), x);
    }

    #[test]
    fn mbn_full_removal_zeroes_everything() {
        let x = ramp();
        let y = apply_mbn(&x, 1.0, &mut Rng::new(5)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mbn_masks_whole_pixels() {
        let x = Tensor::<f64>::full(&[1, 16, 16, 3], 100.0);
        let y = apply_mbn(&x, 0.5, &mut Rng::new(2)).unwrap();
        for px in y.data().chunks(3) {
            assert!(px.iter().all(|&v| v == px[0]));
        }
    }

    #[test]
    fn out_of_range_intensities_are_rejected() {
        let x = ramp();
        let mut rng = Rng::new(0);
        assert!(apply_mbn(&x, 1.5, &mut rng).is_err());
        assert!(apply_apn(&x, -0.1, ApnVariant::Additive, &mut rng).is_err());
        assert!(apply_apn(&x, 1.1, ApnVariant::Additive, &mut rng).is_err());
        assert!(apply_agn(&x, f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn clipping_bounds_hold() {
        let x = ramp();
        let mut rng = Rng::new(9);
        let y = apply_agn(&x, 3.0, &mut rng).unwrap();
        assert!(y.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
        let y = apply_apn(&x, 1.0, ApnVariant::Additive, &mut rng).unwrap();
        assert!(y.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
    }

    #[test]
    fn batch_noise_is_deterministic_per_image() {
        let x = ramp();
        let spec = NoiseSpec::agn(1.0, 77);
        let a = apply_noise_batch(&x, &spec).unwrap();
        let b = apply_noise_batch(&x, &spec).unwrap();
        assert_eq!(a, b);
        let second = apply_noise_batch_from(&x.slice_batch(1, 1).unwrap(), &spec, 1).unwrap();
        assert_eq!(second, a.slice_batch(1, 1).unwrap());
    }

    #[test]
    fn constant_image_has_one_bin() {
        let x = Tensor::<f64>::full(&[1, 5, 5, 3], 42.0);
        let h = channel_histogram(&x, 256).unwrap();
        for c in 0..3 {
            assert_eq!(h.counts[c][42], 25);
            assert_eq!(h.counts[c].iter().filter(|&&n| n > 0).count(), 1);
            assert_eq!(h.stats[c], (42.0, 0.0));
        }
        assert!(channel_histogram(&Tensor::<f64>::full(&[1, 1, 1, 1], 300.0), 256).is_err());
    }
}
