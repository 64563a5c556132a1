//! Scale augmentations: external (resample image and labels before the
//! network) and internal (perturb the scale factor inside the network).

use crate::resnorm::{sample_forward, sample_labels_nn, SampleKernel, SamplingGrid};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("scale {s} outside configured range [{lo}, {hi}]")]
    ScaleOutOfRange { s: f64, lo: f64, hi: f64 },
    #[error("invalid augment config: {0}")]
    InvalidConfig(String),
}

/// External scale augmentation: resample the input pair by a random factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExsaConfig {
    pub enabled: bool,
    pub range_lo: f64,
    pub range_hi: f64,
}

impl Default for ExsaConfig {
    fn default() -> Self {
        ExsaConfig { enabled: false, range_lo: 0.8, range_hi: 1.15 }
    }
}

/// Internal scale augmentation: additive scale-factor noise per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InsaConfig {
    pub enabled: bool,
    pub sigma: f64,
}

impl Default for InsaConfig {
    fn default() -> Self {
        InsaConfig { enabled: false, sigma: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default)]
    pub exsa: ExsaConfig,
    #[serde(default)]
    pub insa: InsaConfig,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.exsa.range_lo > 0.0 && self.exsa.range_lo <= self.exsa.range_hi) {
            return Err(AugmentError::InvalidConfig(format!(
                "exsa range [{}, {}] must satisfy 0 < lo <= hi",
                self.exsa.range_lo, self.exsa.range_hi
            )));
        }
        if self.insa.sigma < 0.0 {
            return Err(AugmentError::InvalidConfig(format!(
                "insa sigma {} must be non-negative",
                self.insa.sigma
            )));
        }
        Ok(())
    }

    /// Uniform scale in `[range_lo, range_hi]` per slice, or 1 when off.
    pub fn exsa_draw<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.exsa.enabled {
            rng.gen_range(self.exsa.range_lo..=self.exsa.range_hi)
        } else {
            1.0
        }
    }
}

/// Resamples an image/label pair by factor `s` about the image center:
/// bilinear for intensities, nearest-neighbour for labels (labels never take
/// interpolated values). Output dims are `round(s * input dims)`.
pub fn exsa_apply(
    cfg: &ExsaConfig,
    image: &Array2<f64>,
    labels: &Array2<u16>,
    s: f64,
) -> Result<(Array2<f64>, Array2<u16>), AugmentError> {
    if s < cfg.range_lo || s > cfg.range_hi {
        return Err(AugmentError::ScaleOutOfRange { s, lo: cfg.range_lo, hi: cfg.range_hi });
    }
    let (h, w) = image.dim();
    debug_assert_eq!(labels.dim(), (h, w));
    let oh = ((h as f64) * s).round().max(1.0) as usize;
    let ow = ((w as f64) * s).round().max(1.0) as usize;
    let grid = SamplingGrid::new((h, w), (oh, ow));
    let img4 = image.clone().into_shape_with_order((1, 1, h, w)).expect("image reshape");
    let out4 = sample_forward(&img4, &grid, SampleKernel::Bilinear);
    let image_out = out4.into_shape_with_order((oh, ow)).expect("image reshape back");
    let labels_out = sample_labels_nn(labels, &grid);
    Ok((image_out, labels_out))
}

/// Scale-factor perturbation for one training step: `Normal(0, sigma)`, or
/// exactly 0 when disabled (inference always runs with 0).
pub fn insa_sample<R: Rng>(cfg: &InsaConfig, rng: &mut R) -> f64 {
    if !cfg.enabled || cfg.sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, cfg.sigma).expect("sigma validated non-negative").sample(rng)
}
