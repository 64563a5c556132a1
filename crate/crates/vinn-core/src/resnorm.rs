//! Differentiable resolution normalization: mapping native-resolution
//! feature maps onto a fixed inner grid and back.
//!
//! The scale factor is the ratio of inner to native voxel size, adjusted per
//! axis so the inner map has integer dims; the decode direction reuses the
//! stored native dims so round trips restore shape exactly. Sampling uses the
//! half-pixel-center convention `src = (dst + 0.5) * scale - 0.5` with
//! clamp-to-edge, which makes a scale of 1 an exact identity for every
//! kernel. All four kernels are linear in the input, and each backward pass
//! is the exact adjoint (transpose) of its forward interpolation matrix.

use crate::tensor::{FeatureMap, Real};
use ndarray::Array4;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Supported voxel sizes in mm; outside this band the latent grid degrades.
pub const VOXEL_MM_MIN: f64 = 0.5;
pub const VOXEL_MM_MAX: f64 = 2.0;

/// Lower clamp on the effective scale factor after augmentation shift.
pub const SCALE_FACTOR_MIN: f64 = 0.25;

/// Smallest admissible inner map side.
pub const INNER_DIM_MIN: usize = 8;

#[derive(Debug, Error)]
pub enum ResnormError {
    #[error("native voxel size {0} mm outside supported range [{VOXEL_MM_MIN}, {VOXEL_MM_MAX}]")]
    VoxelOutOfRange(f64),
    #[error("inner dim {0} below minimum {INNER_DIM_MIN}: latent map degenerate")]
    InnerDimTooSmall(usize),
    #[error("zero-sized native dims {0:?}")]
    EmptyDims((usize, usize)),
}

/// Interpolation kernel for the resampling step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKernel {
    /// Nearest neighbour (round to nearest source index).
    Nn,
    /// Bilinear, the default.
    Bilinear,
    /// Catmull-Rom style bicubic with a = -0.75.
    Bicubic,
    /// Exact box average of the overlapped source cells.
    Area,
}

impl Default for SampleKernel {
    fn default() -> Self {
        SampleKernel::Bilinear
    }
}

impl std::str::FromStr for SampleKernel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nn" => Ok(SampleKernel::Nn),
            "bilinear" => Ok(SampleKernel::Bilinear),
            "bicubic" => Ok(SampleKernel::Bicubic),
            "area" => Ok(SampleKernel::Area),
            other => Err(format!("unknown sampling kernel '{other}'")),
        }
    }
}

/// Direction of the normalization step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResnormDirection {
    /// Native grid -> inner grid.
    Encode,
    /// Inner grid -> stored native grid.
    Decode,
}

/// Scale relation between a native-resolution slice and the inner grid.
///
/// `sf_adjusted` is the exact per-axis ratio `native_dim / inner_dim` after
/// integer rounding of the inner dims, so encode followed by decode restores
/// the native shape exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleFactor {
    pub res_native: f64,
    pub res_inner: f64,
    /// Augmentation shift added to the ideal factor (0 at inference).
    pub alpha: f64,
    /// `res_inner / res_native` before integer adjustment.
    pub sf_ideal: f64,
    /// Exact (native / inner) dim ratio per axis (h, w).
    pub sf_adjusted: (f64, f64),
    pub native_dims: (usize, usize),
    pub inner_dims: (usize, usize),
}

/// Rounds half away from zero, the convention for inner-dim selection.
fn round_half_away(x: f64) -> f64 {
    if x >= 0.0 {
        (x + 0.5).floor()
    } else {
        (x - 0.5).ceil()
    }
}

/// Builds the scale relation for a native slice. The effective factor
/// `sf_ideal + alpha` is floored at [`SCALE_FACTOR_MIN`]; inner dims are
/// rounded half away from zero and must stay at least [`INNER_DIM_MIN`].
pub fn make_scale_factor(
    res_native: f64,
    res_inner: f64,
    native_dims: (usize, usize),
    alpha: f64,
) -> Result<ScaleFactor, ResnormError> {
    if !(VOXEL_MM_MIN..=VOXEL_MM_MAX).contains(&res_native) || !res_native.is_finite() {
        return Err(ResnormError::VoxelOutOfRange(res_native));
    }
    if native_dims.0 == 0 || native_dims.1 == 0 {
        return Err(ResnormError::EmptyDims(native_dims));
    }
    let sf_ideal = res_inner / res_native;
    let effective = (sf_ideal + alpha).max(SCALE_FACTOR_MIN);
    let mut inner = [0usize; 2];
    for (i, &nd) in [native_dims.0, native_dims.1].iter().enumerate() {
        let d = round_half_away(nd as f64 / effective) as usize;
        if d < INNER_DIM_MIN {
            return Err(ResnormError::InnerDimTooSmall(d));
        }
        inner[i] = d;
    }
    Ok(ScaleFactor {
        res_native,
        res_inner,
        alpha,
        sf_ideal,
        sf_adjusted: (
            native_dims.0 as f64 / inner[0] as f64,
            native_dims.1 as f64 / inner[1] as f64,
        ),
        native_dims,
        inner_dims: (inner[0], inner[1]),
    })
}

impl ScaleFactor {
    /// Grid for the given direction: encode targets the inner dims, decode
    /// targets the stored native dims with the reciprocal scale.
    pub fn grid(&self, direction: ResnormDirection) -> SamplingGrid {
        match direction {
            ResnormDirection::Encode => SamplingGrid {
                in_hw: self.native_dims,
                out_hw: self.inner_dims,
                scale: self.sf_adjusted,
            },
            ResnormDirection::Decode => SamplingGrid {
                in_hw: self.inner_dims,
                out_hw: self.native_dims,
                scale: (1.0 / self.sf_adjusted.0, 1.0 / self.sf_adjusted.1),
            },
        }
    }
}

/// Affine map from output pixel indices to fractional source coordinates,
/// `src = (dst + 0.5) * scale - 0.5` per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    scale: (f64, f64),
}

impl SamplingGrid {
    pub fn new(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        SamplingGrid {
            in_hw,
            out_hw,
            scale: (
                in_hw.0 as f64 / out_hw.0 as f64,
                in_hw.1 as f64 / out_hw.1 as f64,
            ),
        }
    }

    pub fn in_hw(&self) -> (usize, usize) {
        self.in_hw
    }

    pub fn out_hw(&self) -> (usize, usize) {
        self.out_hw
    }

    pub fn scale(&self) -> (f64, f64) {
        self.scale
    }

    /// Fractional source row for an output row.
    pub fn src_y(&self, dst: usize) -> f64 {
        (dst as f64 + 0.5) * self.scale.0 - 0.5
    }

    /// Fractional source column for an output column.
    pub fn src_x(&self, dst: usize) -> f64 {
        (dst as f64 + 0.5) * self.scale.1 - 0.5
    }
}

/// One axis worth of interpolation taps: source indices (already clamped to
/// the edge) and their weights.
fn taps_1d(kernel: SampleKernel, src: f64, dim: usize, scale: f64) -> Vec<(usize, f64)> {
    let clamp = |i: isize| i.clamp(0, dim as isize - 1) as usize;
    match kernel {
        SampleKernel::Nn => {
            let i = (src + 0.5).floor() as isize;
            vec![(clamp(i), 1.0)]
        }
        SampleKernel::Bilinear => {
            let i0 = src.floor() as isize;
            let f = src - i0 as f64;
            vec![(clamp(i0), 1.0 - f), (clamp(i0 + 1), f)]
        }
        SampleKernel::Bicubic => {
            let i0 = src.floor() as isize;
            let f = src - i0 as f64;
            let mut taps = Vec::with_capacity(4);
            for k in -1..=2isize {
                let t = (f - k as f64).abs();
                let w = cubic_weight(t);
                if w != 0.0 {
                    taps.push((clamp(i0 + k), w));
                }
            }
            taps
        }
        SampleKernel::Area => {
            // Output pixel covers [src+0.5-scale/2, src+0.5+scale/2) in
            // source pixel units; weight each source cell by its overlap.
            let center = src + 0.5;
            let half = scale / 2.0;
            let (lo, hi) = (center - half, center + half);
            let first = lo.floor().max(0.0) as usize;
            let last = (hi.ceil() as usize).min(dim).max(first + 1);
            let mut taps = Vec::with_capacity(last - first);
            for i in first..last {
                let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((i, overlap / scale));
                }
            }
            // Clamp-to-edge for boxes hanging past the image: fold the
            // missing mass onto the edge cell so weights still sum to 1.
            let total: f64 = taps.iter().map(|t| t.1).sum();
            if (total - 1.0).abs() > 1e-12 && !taps.is_empty() {
                let missing = 1.0 - total;
                if lo < 0.0 {
                    taps.first_mut().unwrap().1 += missing;
                } else {
                    taps.last_mut().unwrap().1 += missing;
                }
            }
            taps
        }
    }
}

/// Catmull-Rom family weight with a = -0.75.
fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.75;
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Resamples every (batch, channel) lane of `x` through the grid.
pub fn sample_forward<T: Real>(
    x: &FeatureMap<T>,
    grid: &SamplingGrid,
    kernel: SampleKernel,
) -> FeatureMap<T> {
    let (n, c, ih, iw) = x.dim();
    debug_assert_eq!((ih, iw), grid.in_hw);
    let (oh, ow) = grid.out_hw;
    let row_taps: Vec<_> = (0..oh).map(|y| taps_1d(kernel, grid.src_y(y), ih, grid.scale.0)).collect();
    let col_taps: Vec<_> = (0..ow).map(|xo| taps_1d(kernel, grid.src_x(xo), iw, grid.scale.1)).collect();
    let mut out = Array4::zeros((n, c, oh, ow));
    for bn in 0..n {
        for ch in 0..c {
            for (oy, rt) in row_taps.iter().enumerate() {
                for (ox, ct) in col_taps.iter().enumerate() {
                    let mut acc = T::zero();
                    for &(sy, wy) in rt {
                        for &(sx, wx) in ct {
                            acc += x[[bn, ch, sy, sx]] * T::from_f64(wy * wx);
                        }
                    }
                    out[[bn, ch, oy, ox]] = acc;
                }
            }
        }
    }
    out
}

/// Exact adjoint of [`sample_forward`]: scatter-adds output gradients back
/// through the same taps.
pub fn sample_backward<T: Real>(
    gout: &FeatureMap<T>,
    in_dim: (usize, usize, usize, usize),
    grid: &SamplingGrid,
    kernel: SampleKernel,
) -> FeatureMap<T> {
    let (n, c, ih, iw) = in_dim;
    let (oh, ow) = grid.out_hw;
    debug_assert_eq!((oh, ow), (gout.dim().2, gout.dim().3));
    let row_taps: Vec<_> = (0..oh).map(|y| taps_1d(kernel, grid.src_y(y), ih, grid.scale.0)).collect();
    let col_taps: Vec<_> = (0..ow).map(|xo| taps_1d(kernel, grid.src_x(xo), iw, grid.scale.1)).collect();
    let mut dx = Array4::zeros((n, c, ih, iw));
    for bn in 0..n {
        for ch in 0..c {
            for (oy, rt) in row_taps.iter().enumerate() {
                for (ox, ct) in col_taps.iter().enumerate() {
                    let g = gout[[bn, ch, oy, ox]];
                    for &(sy, wy) in rt {
                        for &(sx, wx) in ct {
                            dx[[bn, ch, sy, sx]] += g * T::from_f64(wy * wx);
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour resampling of an integer label slice through the same
/// grid convention (used for label-space augmentation, outside the graph).
pub fn sample_labels_nn(labels: &ndarray::Array2<u16>, grid: &SamplingGrid) -> ndarray::Array2<u16> {
    let (ih, iw) = labels.dim();
    debug_assert_eq!((ih, iw), grid.in_hw);
    let (oh, ow) = grid.out_hw;
    ndarray::Array2::from_shape_fn((oh, ow), |(y, x)| {
        let sy = ((grid.src_y(y) + 0.5).floor() as isize).clamp(0, ih as isize - 1) as usize;
        let sx = ((grid.src_x(x) + 0.5).floor() as isize).clamp(0, iw as isize - 1) as usize;
        labels[[sy, sx]]
    })
}
