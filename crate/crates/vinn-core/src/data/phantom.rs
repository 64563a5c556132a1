//! Procedural brain-like phantoms with exact analytic ground truth.
//!
//! The label function is defined in continuous mm coordinates and evaluated
//! at voxel centers, so rendering the same spec at two voxel sizes describes
//! the same physical object with no resampling anywhere in ground-truth
//! creation. Geometry: hemisphere-split ellipsoids (WM core inside a GM
//! shell), sinusoidal sulci cut into the shell, one subcortical blob per
//! hemisphere, a midline brainstem, and a CSF halo.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::labels::{LabelTable, Tissue};
use super::volume::{LabelVolume, RawVolume, VOLUME_VOXEL_MM};
use super::DataError;

/// One sulcus: a wavy slab of CSF cut into the GM shell from the surface
/// down to `depth_frac` of the normalized ellipsoid radius.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SulcusSpec {
    /// Slab normal (unit length not required; normalized on use).
    pub normal: [f64; 3],
    /// In-slab direction the sinusoidal wave runs along.
    pub tangent: [f64; 3],
    /// Signed distance of the slab mid-plane from the origin, mm.
    pub offset_mm: f64,
    /// Full slab width, mm.
    pub width_mm: f64,
    /// The cut stops at this normalized radius (> wm_frac keeps a GM floor).
    pub depth_frac: f64,
    /// Sinusoidal displacement of the mid-plane, mm.
    pub wave_amp_mm: f64,
    /// Wave frequency, radians per mm along the tangent.
    pub wave_freq: f64,
}

/// Analytic phantom description. All lengths in mm, centered at the volume
/// center; the field of view is a cube of side `fov_mm`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub fov_mm: f64,
    /// Brain (cortex surface) ellipsoid semi-axes along (x, y, z).
    pub brain_radii_mm: [f64; 3],
    /// WM core as a fraction of the brain radii.
    pub wm_frac: f64,
    /// Outer CSF halo as a fraction of the brain radii.
    pub csf_frac: f64,
    pub sulci: Vec<SulcusSpec>,
    /// Right-hemisphere blob center; the left blob is its mirror image.
    pub blob_center_mm: [f64; 3],
    pub blob_radius_mm: f64,
    /// Brainstem ellipsoid center (must sit on the midline, x = 0).
    pub stem_center_mm: [f64; 3],
    pub stem_radii_mm: [f64; 3],
    /// Mean intensity per tissue, indexed by [`Tissue`] order:
    /// background, CSF, WM, GM, subcortical, brainstem.
    pub tissue_means: [f64; 6],
    pub noise_sigma: f64,
    /// Peak amplitude of the low-order polynomial bias field.
    pub bias_amp: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Desk-scale default: a 48 mm field of view with 1.5 mm sulci.
    pub fn desk(seed: u64) -> PhantomSpec {
        PhantomSpec {
            fov_mm: 48.0,
            brain_radii_mm: [18.0, 20.0, 16.0],
            wm_frac: 0.62,
            csf_frac: 1.12,
            sulci: default_sulci(1.5),
            blob_center_mm: [6.0, 2.0, 1.0],
            blob_radius_mm: 3.0,
            stem_center_mm: [0.0, -2.0, -11.0],
            stem_radii_mm: [3.0, 3.5, 6.0],
            tissue_means: [10.0, 45.0, 150.0, 90.0, 120.0, 110.0],
            noise_sigma: 4.0,
            bias_amp: 8.0,
            seed,
        }
    }

    /// Same geometry with every sulcus set to `width_mm`.
    pub fn with_sulcus_width(mut self, width_mm: f64) -> PhantomSpec {
        for s in &mut self.sulci {
            s.width_mm = width_mm;
        }
        self
    }
}

/// A spread of sulci whose slabs cut across all three anatomical planes.
fn default_sulci(width_mm: f64) -> Vec<SulcusSpec> {
    let mk = |normal, tangent, offset_mm, wave_amp_mm, wave_freq| SulcusSpec {
        normal,
        tangent,
        offset_mm,
        width_mm,
        depth_frac: 0.72,
        wave_amp_mm,
        wave_freq,
    };
    vec![
        // Near-sagittal slab in the right hemisphere. Straight (no wave):
        // it doubles as the partial-volume connectivity probe, where the
        // open/closed transition must depend on voxel size alone.
        mk([1.0, 0.0, 0.0], [0.0, 0.0, 1.0], 8.0, 0.0, 0.5),
        // Its mirror image in the left hemisphere.
        mk([1.0, 0.0, 0.0], [0.0, 0.0, 1.0], -8.0, 0.0, 0.5),
        // Near-coronal slabs.
        mk([0.0, 1.0, 0.0], [1.0, 0.0, 0.0], 9.0, 1.0, 0.45),
        mk([0.0, 1.0, 0.0], [0.0, 0.0, 1.0], -9.5, 1.0, 0.4),
        // Near-axial slab.
        mk([0.0, 0.0, 1.0], [0.0, 1.0, 0.0], 8.5, 0.9, 0.5),
        // Oblique slabs so no plane sees only in-plane cuts.
        mk([0.6, 0.8, 0.0], [0.0, 0.0, 1.0], 4.0, 0.7, 0.6),
        mk([0.6, -0.8, 0.0], [0.0, 0.0, 1.0], -4.0, 0.7, 0.6),
    ]
}

fn norm3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Normalized ellipsoid radius: 1.0 on the surface defined by `radii`.
fn rho(p: [f64; 3], center: [f64; 3], radii: [f64; 3]) -> f64 {
    let dx = (p[0] - center[0]) / radii[0];
    let dy = (p[1] - center[1]) / radii[1];
    let dz = (p[2] - center[2]) / radii[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

fn in_sulcus(s: &SulcusSpec, p: [f64; 3]) -> bool {
    let n = norm3(s.normal);
    let t = norm3(s.tangent);
    let wave = s.wave_amp_mm * (s.wave_freq * dot3(t, p)).sin();
    (dot3(n, p) - s.offset_mm - wave).abs() <= 0.5 * s.width_mm
}

impl PhantomSpec {
    /// The analytic label at a continuous mm coordinate (volume-centered).
    pub fn label_at(&self, p: [f64; 3], table: &LabelTable) -> u16 {
        let ids = |tissue: Tissue, left: bool| -> u16 {
            table
                .entries()
                .iter()
                .find(|e| {
                    e.tissue == tissue
                        && match e.hemisphere {
                            super::Hemisphere::Left => left,
                            super::Hemisphere::Right => !left,
                            super::Hemisphere::None => true,
                        }
                })
                .map(|e| e.id)
                .expect("tissue present in table")
        };
        let left = p[0] < 0.0;
        let r = rho(p, [0.0; 3], self.brain_radii_mm);

        if rho(p, self.stem_center_mm, self.stem_radii_mm) <= 1.0 {
            return ids(Tissue::Brainstem, left);
        }
        let mirror = [-self.blob_center_mm[0], self.blob_center_mm[1], self.blob_center_mm[2]];
        let br = [self.blob_radius_mm; 3];
        if rho(p, self.blob_center_mm, br) <= 1.0 || rho(p, mirror, br) <= 1.0 {
            return ids(Tissue::Subcortical, left);
        }
        if r <= self.wm_frac {
            return ids(Tissue::WhiteMatter, left);
        }
        if r <= 1.0 {
            for s in &self.sulci {
                if r > s.depth_frac && in_sulcus(s, p) {
                    return ids(Tissue::Csf, left);
                }
            }
            return ids(Tissue::GrayMatter, left);
        }
        if r <= self.csf_frac {
            return ids(Tissue::Csf, left);
        }
        ids(Tissue::Background, left)
    }
}

/// Voxel-center coordinate of index `i` along an axis, grid anchored at the
/// low field-of-view corner. Anchoring (rather than centering the possibly
/// overshooting grid) makes 2× grids nest exactly, which the majority-vote
/// consistency between resolutions relies on.
pub(crate) fn voxel_center(i: usize, voxel_mm: f64, fov_mm: f64) -> f64 {
    (i as f64 + 0.5) * voxel_mm - 0.5 * fov_mm
}

/// Grid size along each axis for a given voxel size.
pub(crate) fn grid_dim(fov_mm: f64, voxel_mm: f64) -> usize {
    (fov_mm / voxel_mm).round() as usize
}

/// Render a phantom at `voxel_mm`: exact labels at voxel centers, and raw
/// intensity = tissue mean + polynomial bias field + Gaussian noise. The
/// bias field depends only on the spec seed; the noise stream additionally
/// folds in the voxel size so each grid gets an independent realization
/// while staying bit-reproducible.
pub fn render_phantom(
    spec: &PhantomSpec,
    voxel_mm: f64,
    table: &LabelTable,
) -> Result<(RawVolume, LabelVolume), DataError> {
    let (lo, hi) = VOLUME_VOXEL_MM;
    if !(voxel_mm.is_finite() && voxel_mm >= lo && voxel_mm <= hi) {
        return Err(DataError::BadVoxelSize(voxel_mm));
    }
    let d = grid_dim(spec.fov_mm, voxel_mm);
    let dims = (d, d, d);
    let half = 0.5 * spec.fov_mm;

    let mut bias_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x5b1a5));
    let coef: Vec<f64> = (0..8).map(|_| bias_rng.gen_range(-1.0..1.0)).collect();
    let bias = |p: [f64; 3]| -> f64 {
        let (x, y, z) = (p[0] / half, p[1] / half, p[2] / half);
        spec.bias_amp
            * (coef[0] * x
                + coef[1] * y
                + coef[2] * z
                + coef[3] * x * y
                + coef[4] * y * z
                + coef[5] * x * z
                + coef[6] * (x * x - 1.0 / 3.0)
                + coef[7] * (z * z - 1.0 / 3.0))
    };

    let mut noise_rng =
        ChaCha8Rng::seed_from_u64(spec.seed ^ voxel_mm.to_bits().rotate_left(17));
    let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma >= 0");

    let mut labels = Array3::<u16>::zeros(dims);
    let mut image = Array3::<f64>::zeros(dims);
    // Raster order fixes the noise draw sequence.
    for k in 0..d {
        let z = voxel_center(k, voxel_mm, spec.fov_mm);
        for j in 0..d {
            let y = voxel_center(j, voxel_mm, spec.fov_mm);
            for i in 0..d {
                let x = voxel_center(i, voxel_mm, spec.fov_mm);
                let p = [x, y, z];
                let id = spec.label_at(p, table);
                labels[[k, j, i]] = id;
                let tissue = table.entry(id).expect("id from table").tissue as usize;
                image[[k, j, i]] =
                    spec.tissue_means[tissue] + bias(p) + normal.sample(&mut noise_rng);
            }
        }
    }
    Ok((
        RawVolume { voxel_mm, data: image },
        LabelVolume { voxel_mm, data: labels },
    ))
}

/// Downsample labels by 2× per axis using per-block majority vote
/// (ties break to the smallest id). Trailing odd voxels are dropped.
pub fn majority_vote_downsample(v: &LabelVolume) -> LabelVolume {
    let (d0, d1, d2) = v.data.dim();
    let out_dims = (d0 / 2, d1 / 2, d2 / 2);
    let mut out = Array3::<u16>::zeros(out_dims);
    for k in 0..out_dims.0 {
        for j in 0..out_dims.1 {
            for i in 0..out_dims.2 {
                let mut counts: Vec<(u16, usize)> = Vec::with_capacity(8);
                for dk in 0..2 {
                    for dj in 0..2 {
                        for di in 0..2 {
                            let id = v.data[[2 * k + dk, 2 * j + dj, 2 * i + di]];
                            match counts.iter_mut().find(|(c, _)| *c == id) {
                                Some((_, n)) => *n += 1,
                                None => counts.push((id, 1)),
                            }
                        }
                    }
                }
                counts.sort_by_key(|&(id, n)| (std::cmp::Reverse(n), id));
                out[[k, j, i]] = counts[0].0;
            }
        }
    }
    LabelVolume {
        voxel_mm: v.voxel_mm * 2.0,
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Hemisphere;
    use std::collections::HashSet;

    fn render(seed: u64, voxel_mm: f64) -> (RawVolume, LabelVolume) {
        let table = LabelTable::desk();
        render_phantom(&PhantomSpec::desk(seed), voxel_mm, &table).unwrap()
    }

    #[test]
    fn all_classes_present_at_1mm() {
        let (_, labels) = render(7, 1.0);
        let present: HashSet<u16> = labels.data.iter().copied().collect();
        assert_eq!(present, (0..9).collect::<HashSet<u16>>());
        LabelTable::desk().check_labels(&labels.data).unwrap();
    }

    #[test]
    fn wm_volume_agrees_across_resolutions() {
        let (_, fine) = render(3, 0.7);
        let (_, coarse) = render(3, 1.0);
        let wm = |v: &LabelVolume| v.class_volume_mm3(2) + v.class_volume_mm3(3);
        let (a, b) = (wm(&fine), wm(&coarse));
        let rel = (a - b).abs() / b;
        assert!(rel < 0.03, "WM volume mismatch: {a:.1} vs {b:.1} mm3 ({rel:.4})");
    }

    #[test]
    fn seed_fixed_render_is_bit_reproducible() {
        let (img1, lab1) = render(11, 1.4);
        let (img2, lab2) = render(11, 1.4);
        assert_eq!(img1.data, img2.data);
        assert_eq!(lab1, lab2);
    }

    #[test]
    fn seed_changes_intensity_but_not_geometry() {
        let (img1, lab1) = render(1, 1.0);
        let (img2, lab2) = render(2, 1.0);
        assert_eq!(lab1, lab2, "geometry must depend only on shape params");
        assert_ne!(img1.data, img2.data);
    }

    #[test]
    fn hemispheres_split_at_midline() {
        let table = LabelTable::desk();
        let spec = PhantomSpec::desk(0);
        let (_, labels) = render_phantom(&spec, 1.0, &table).unwrap();
        let d = labels.data.dim().2;
        for ((_, _, i), &id) in labels.data.indexed_iter() {
            let x = voxel_center(i, 1.0, spec.fov_mm);
            match table.entry(id).unwrap().hemisphere {
                Hemisphere::Left => assert!(x < 0.0, "left id {id} at x={x}"),
                Hemisphere::Right => assert!(x >= 0.0, "right id {id} at x={x}"),
                Hemisphere::None => {}
            }
        }
        assert_eq!(d, 48);
    }

    #[test]
    fn intensity_means_order_by_tissue() {
        let (img, labels) = render(5, 1.0);
        let mean_of = |id: u16| -> f64 {
            let mut sum = 0.0;
            let mut n = 0usize;
            for (idx, &l) in labels.data.indexed_iter() {
                if l == id {
                    sum += img.data[idx];
                    n += 1;
                }
            }
            sum / n as f64
        };
        let wm = (mean_of(2) + mean_of(3)) / 2.0;
        let gm = (mean_of(4) + mean_of(5)) / 2.0;
        let csf = mean_of(1);
        assert!(wm > gm + 20.0 && gm > csf + 20.0, "wm={wm} gm={gm} csf={csf}");
    }

    #[test]
    fn out_of_range_voxel_size_rejected() {
        let table = LabelTable::desk();
        let spec = PhantomSpec::desk(0);
        assert!(render_phantom(&spec, 0.4, &table).is_err());
        assert!(render_phantom(&spec, 2.5, &table).is_err());
    }

    /// 6-connected component count of GM voxels inside a mm-space box.
    fn gm_components_in_box(labels: &LabelVolume, fov: f64, lo: [f64; 3], hi: [f64; 3]) -> usize {
        let h = labels.voxel_mm;
        let gm = |id: u16| id == 4 || id == 5;
        let (d0, d1, d2) = labels.data.dim();
        let inside = |k: usize, j: usize, i: usize| -> bool {
            let p = [
                voxel_center(i, h, fov),
                voxel_center(j, h, fov),
                voxel_center(k, h, fov),
            ];
            (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a])
        };
        let mut seen = Array3::<bool>::from_elem(labels.data.dim(), false);
        let mut components = 0;
        for k in 0..d0 {
            for j in 0..d1 {
                for i in 0..d2 {
                    if seen[[k, j, i]] || !gm(labels.data[[k, j, i]]) || !inside(k, j, i) {
                        continue;
                    }
                    components += 1;
                    let mut stack = vec![(k, j, i)];
                    seen[[k, j, i]] = true;
                    while let Some((ck, cj, ci)) = stack.pop() {
                        let neighbors = [
                            (ck.wrapping_sub(1), cj, ci),
                            (ck + 1, cj, ci),
                            (ck, cj.wrapping_sub(1), ci),
                            (ck, cj + 1, ci),
                            (ck, cj, ci.wrapping_sub(1)),
                            (ck, cj, ci + 1),
                        ];
                        for (nk, nj, ni) in neighbors {
                            if nk < d0
                                && nj < d1
                                && ni < d2
                                && !seen[[nk, nj, ni]]
                                && gm(labels.data[[nk, nj, ni]])
                                && inside(nk, nj, ni)
                            {
                                seen[[nk, nj, ni]] = true;
                                stack.push((nk, nj, ni));
                            }
                        }
                    }
                }
            }
        }
        components
    }

    /// Partial-volume demonstrator: a 1.5 mm sulcus separates its GM banks
    /// at 0.7 mm but closes at 2.0 mm, where no voxel center falls inside
    /// the slit along some crossings.
    #[test]
    fn narrow_sulcus_open_at_fine_closed_at_coarse() {
        let spec = PhantomSpec::desk(0);
        // Probe box straddling the first sulcus (slab at x = 8). The box
        // floor sits above the sulcus floor everywhere (min rho > 0.72 at
        // the (4.5, 15, 0) corner), so the banks cannot connect underneath
        // the cut, and it stays clear of every other sulcus slab.
        let lo = [4.5, 15.0, -3.0];
        let hi = [10.5, 17.8, 3.0];
        let (_, fine) = render(0, 0.7);
        let open = gm_components_in_box(&fine, spec.fov_mm, lo, hi);
        assert!(open >= 2, "banks connected at 0.7 mm: {open} component(s)");
        let (_, coarse) = render(0, 2.0);
        let closed = gm_components_in_box(&coarse, spec.fov_mm, lo, hi);
        assert_eq!(closed, 1, "banks did not fuse at 2.0 mm");
    }

    #[test]
    fn majority_vote_matches_direct_coarse_render() {
        let (_, fine) = render(13, 0.7);
        let (_, direct) = render(13, 1.4);
        let voted = majority_vote_downsample(&fine);
        assert_eq!(voted.data.dim(), direct.data.dim());
        assert_eq!(voted.voxel_mm, 1.4);
        let total = voted.data.len();
        let agree = voted
            .data
            .iter()
            .zip(direct.data.iter())
            .filter(|(a, b)| a == b)
            .count();
        let frac = agree as f64 / total as f64;
        assert!(frac >= 0.97, "majority-vote agreement {frac:.4} < 0.97");
    }

    #[test]
    fn majority_vote_tie_breaks_to_smallest_id() {
        let mut data = Array3::<u16>::zeros((2, 2, 2));
        // 4 voxels of class 5, 4 of class 3: tie resolves to 3.
        for (n, v) in data.iter_mut().enumerate() {
            *v = if n % 2 == 0 { 5 } else { 3 };
        }
        let v = LabelVolume { voxel_mm: 1.0, data };
        assert_eq!(majority_vote_downsample(&v).data[[0, 0, 0]], 3);
    }
}
