//! Composite segmentation loss and its per-pixel weight map.
//!
//! The loss is a weighted logistic term minus a soft-Dice term over class
//! probabilities. The weight map is a sum of four non-negative parts:
//! median-frequency class balancing, a boundary term from the gradient of
//! the class-weighted label image, and two optional morphological masks that
//! up-weight partial-volume trouble spots — a band at the outer brain
//! boundary and the thin-structure set (deep sulci / thin strands) exposed
//! by closing the gray-matter map.

use crate::autograd::{Graph, GraphError, NodeId};
use crate::tensor::{FeatureMap, Real};
use ndarray::{Array2, Array4};
use thiserror::Error;

/// Epsilon inside the guarded logarithm of the logistic term.
pub const LOG_EPS: f64 = 1e-7;

/// Default physical radius of the morphological structuring element, in mm.
pub const MASK_RADIUS_MM: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("label image is empty")]
    EmptyLabels,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u16, classes: usize },
}

/// Structuring-element radius in pixels for a given in-plane voxel size:
/// the physical closing scale stays constant across resolutions.
pub fn mask_radius(res_native: f64) -> usize {
    (MASK_RADIUS_MM / res_native).round() as usize
}

/// Per-class weights `median(freq) / freq(c)` over the classes present;
/// absent classes get 0. The median of an even count is the midpoint mean.
pub fn median_freq_weights(labels: &Array2<u16>, classes: usize) -> Result<Vec<f64>, LossError> {
    if labels.is_empty() {
        return Err(LossError::EmptyLabels);
    }
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l as usize >= classes {
            return Err(LossError::LabelOutOfRange { label: l, classes });
        }
        counts[l as usize] += 1;
    }
    let n = labels.len() as f64;
    let mut present: Vec<f64> = counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 / n).collect();
    present.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = present.len();
    let median = if m % 2 == 1 {
        present[m / 2]
    } else {
        (present[m / 2 - 1] + present[m / 2]) / 2.0
    };
    Ok(counts
        .iter()
        .map(|&c| if c > 0 { median / (c as f64 / n) } else { 0.0 })
        .collect())
}

/// Boundary term: magnitude of the central-difference gradient of the
/// class-weighted label image (each pixel holding its class weight), scaled
/// to a maximum of 1. Zero inside class interiors. Edges clamp-replicate.
pub fn gradient_weights(labels: &Array2<u16>, class_weights: &[f64]) -> Array2<f64> {
    let (h, w) = labels.dim();
    let v = labels.mapv(|l| class_weights[l as usize]);
    let mut g = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let gy = (v[[(y + 1).min(h - 1), x]] - v[[y.saturating_sub(1), x]]) / 2.0;
            let gx = (v[[y, (x + 1).min(w - 1)]] - v[[y, x.saturating_sub(1)]]) / 2.0;
            g[[y, x]] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = g.iter().cloned().fold(0.0_f64, f64::max);
    if max > 0.0 {
        g.mapv_inplace(|x| x / max);
    }
    g
}

/// Binary dilation with a square element of side `2r + 1`; pixels outside
/// the image count as background. Separable (row pass then column pass).
pub fn dilate(m: &Array2<bool>, r: usize) -> Array2<bool> {
    window_pass(&window_pass(m, r, false, true), r, true, true)
}

/// Binary erosion with a square element of side `2r + 1`; pixels outside
/// the image count as background, so shapes touching the border erode there.
pub fn erode(m: &Array2<bool>, r: usize) -> Array2<bool> {
    window_pass(&window_pass(m, r, false, false), r, true, false)
}

/// Morphological closing: dilation then erosion with the same element.
pub fn closing(m: &Array2<bool>, r: usize) -> Array2<bool> {
    erode(&dilate(m, r), r)
}

/// One 1-D min/max sweep of length `2r + 1` along rows or columns.
fn window_pass(m: &Array2<bool>, r: usize, vertical: bool, is_max: bool) -> Array2<bool> {
    let (h, w) = m.dim();
    let mut out = Array2::from_elem((h, w), false);
    let ri = r as isize;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = !is_max;
            for d in -ri..=ri {
                let (sy, sx) = if vertical { (y + d, x) } else { (y, x + d) };
                let v = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                    m[[sy as usize, sx as usize]]
                } else {
                    false
                };
                acc = if is_max { acc || v } else { acc && v };
            }
            out[[y as usize, x as usize]] = acc;
        }
    }
    out
}

/// Thin-structure mask: what closing adds to the gray-matter map — deep
/// sulci and thin strands swallowed by the element — minus the map itself.
pub fn wm_sulci_mask(gm: &Array2<bool>, radius: usize) -> Array2<bool> {
    let closed = closing(gm, radius);
    ndarray::Zip::from(&closed).and(gm).map_collect(|&c, &g| c && !g)
}

/// Outer gray-matter band: the brain mask minus its erosion, a boundary
/// band roughly `radius` wide.
pub fn outer_gm_mask(brain: &Array2<bool>, radius: usize) -> Array2<bool> {
    let eroded = erode(brain, radius);
    ndarray::Zip::from(brain).and(&eroded).map_collect(|&b, &e| b && !e)
}

/// The four weight-map terms for one slice; the effective per-pixel weight
/// is their sum.
#[derive(Debug, Clone)]
pub struct WeightMap {
    pub median_freq: Array2<f64>,
    pub gradient: Array2<f64>,
    pub gm: Array2<f64>,
    pub wm_sulci: Array2<f64>,
}

impl WeightMap {
    pub fn total(&self) -> Array2<f64> {
        &(&self.median_freq + &self.gradient) + &(&self.gm + &self.wm_sulci)
    }
}

/// Assembles the weight map of one training slice. `gm`/`brain` are the
/// slice's gray-matter and brain masks; `w_hires` is the amplitude of the
/// two morphological terms (0 disables them, leaving the base loss).
pub fn slice_weight_map(
    labels: &Array2<u16>,
    classes: usize,
    gm: &Array2<bool>,
    brain: &Array2<bool>,
    radius: usize,
    w_hires: f64,
) -> Result<WeightMap, LossError> {
    let class_w = median_freq_weights(labels, classes)?;
    let median_freq = labels.mapv(|l| class_w[l as usize]);
    let gradient = gradient_weights(labels, &class_w);
    let (gm_term, wm_term) = if w_hires > 0.0 {
        (
            outer_gm_mask(brain, radius).mapv(|b| if b { w_hires } else { 0.0 }),
            wm_sulci_mask(gm, radius).mapv(|b| if b { w_hires } else { 0.0 }),
        )
    } else {
        (Array2::zeros(labels.dim()), Array2::zeros(labels.dim()))
    };
    Ok(WeightMap { median_freq, gradient, gm: gm_term, wm_sulci: wm_term })
}

/// One-hot encoding of a label slice as a (1, classes, H, W) map.
pub fn one_hot<T: Real>(labels: &Array2<u16>, classes: usize) -> FeatureMap<T> {
    let (h, w) = labels.dim();
    let mut y = Array4::zeros((1, classes, h, w));
    for yx in 0..h {
        for xx in 0..w {
            y[[0, labels[[yx, xx]] as usize, yx, xx]] = T::one();
        }
    }
    y
}

/// Graph nodes of the three loss scalars.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub logistic: NodeId,
    pub dice: NodeId,
}

/// Builds `total = logistic − dice` on the graph:
/// `logistic = −Σ ω·y·log(p)` (log clamped at 1e-7) and
/// `dice = Σ_classes 2Σpy / (Σp + Σy)` with pixel sums over the whole batch.
/// `y` is one-hot (N, C, H, W); `omega` is the per-pixel weight (N, 1, H, W).
pub fn composite_loss<T: Real>(
    g: &mut Graph<T>,
    p: NodeId,
    y: &FeatureMap<T>,
    omega: &FeatureMap<T>,
) -> Result<LossNodes, GraphError> {
    let (n, c, h, w) = y.dim();
    debug_assert_eq!(omega.dim(), (n, 1, h, w));
    let mut wy = y.clone();
    for bi in 0..n {
        for ci in 0..c {
            for yi in 0..h {
                for xi in 0..w {
                    wy[[bi, ci, yi, xi]] *= omega[[bi, 0, yi, xi]];
                }
            }
        }
    }
    let wy = g.input(wy);
    let y = g.input(y.clone());

    let logp = g.log_clamped(p, T::from_f64(LOG_EPS))?;
    let wlogp = g.mul(logp, wy)?;
    let s = g.sum_all(wlogp)?;
    let logistic = g.scale(s, -T::one())?;

    let py = g.mul(p, y)?;
    let num = g.sum_nhw(py)?;
    let num2 = g.scale(num, T::from_f64(2.0))?;
    let sp = g.sum_nhw(p)?;
    let sy = g.sum_nhw(y)?;
    let den = g.add(sp, sy)?;
    let per_class = g.div_guarded(num2, den)?;
    let dice = g.sum_all(per_class)?;

    let neg_dice = g.scale(dice, -T::one())?;
    let total = g.add(logistic, neg_dice)?;
    Ok(LossNodes { total, logistic, dice })
}
