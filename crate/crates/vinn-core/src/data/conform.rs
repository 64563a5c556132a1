//! Robust intensity normalization to `[0, 255]`.

use super::volume::{IntensityVolume, RawVolume};
use super::DataError;

/// Nearest-rank quantile bounds: indices `floor(q_lo·(n−1))` and
/// `ceil(q_hi·(n−1))` into the sorted values. Picking actual data values (not
/// interpolated ones) is what makes the rescale exactly idempotent.
fn robust_bounds(values: &[f64]) -> (f64, f64) {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let lo = (0.001 * (n - 1) as f64).floor() as usize;
    let hi = (0.999 * (n - 1) as f64).ceil() as usize;
    (sorted[lo], sorted[hi])
}

/// Conform a raw volume: clip at the robust `[q0.001, q0.999]` bounds, then
/// affine-map to `[0, 255]` and round to nearest. A constant (degenerate)
/// volume maps to mid-gray 128. The `voxel_mm` triple must be isotropic;
/// volumes produced by the phantom renderer always are, but imported data may
/// not be, so the check lives here.
pub fn conform(v: &RawVolume, voxel_mm: [f64; 3]) -> Result<IntensityVolume, DataError> {
    if !(voxel_mm[0] == voxel_mm[1] && voxel_mm[1] == voxel_mm[2]) {
        return Err(DataError::Anisotropic(voxel_mm));
    }
    if !(voxel_mm[0].is_finite() && voxel_mm[0] > 0.0) {
        return Err(DataError::BadVoxelSize(voxel_mm[0]));
    }
    if v.data.is_empty() {
        return Err(DataError::EmptyVolume);
    }
    let flat: Vec<f64> = v.data.iter().copied().collect();
    let (lo, hi) = robust_bounds(&flat);
    let data = if hi > lo {
        let scale = 255.0 / (hi - lo);
        v.data.mapv(|x| {
            let c = x.clamp(lo, hi);
            ((c - lo) * scale).round() as u8
        })
    } else {
        v.data.mapv(|_| 128u8)
    };
    Ok(IntensityVolume {
        voxel_mm: voxel_mm[0],
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_raw(seed: u64, dims: (usize, usize, usize)) -> RawVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RawVolume {
            voxel_mm: 1.0,
            data: Array3::from_shape_fn(dims, |_| rng.gen_range(-50.0..300.0)),
        }
    }

    fn iso(v: &RawVolume) -> [f64; 3] {
        [v.voxel_mm; 3]
    }

    #[test]
    fn conform_is_idempotent() {
        for seed in 0..5 {
            let raw = random_raw(seed, (12, 12, 12));
            let once = conform(&raw, iso(&raw)).unwrap();
            let again_input = RawVolume {
                voxel_mm: once.voxel_mm,
                data: once.data.mapv(|x| x as f64),
            };
            let twice = conform(&again_input, iso(&raw)).unwrap();
            assert_eq!(once, twice, "seed {seed}");
        }
    }

    #[test]
    fn constant_volume_maps_to_mid_gray() {
        let raw = RawVolume {
            voxel_mm: 1.0,
            data: Array3::from_elem((4, 4, 4), 77.3),
        };
        let out = conform(&raw, iso(&raw)).unwrap();
        assert!(out.data.iter().all(|&v| v == 128));
    }

    #[test]
    fn single_outlier_leaves_histogram_unchanged() {
        let raw = random_raw(9, (12, 12, 12));
        let clean = conform(&raw, iso(&raw)).unwrap();
        let mut spiked = raw.clone();
        // Replace the max so the outlier only displaces the top-ranked value.
        let (max_idx, _) = spiked
            .data
            .indexed_iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, v)| (i, *v))
            .unwrap();
        spiked.data[max_idx] = 1e6;
        let out = conform(&spiked, iso(&raw)).unwrap();
        for (idx, &v) in out.data.indexed_iter() {
            if idx == max_idx {
                assert_eq!(v, 255);
            } else {
                assert_eq!(v, clean.data[idx], "voxel {idx:?} shifted");
            }
        }
    }

    #[test]
    fn output_spans_full_range() {
        let raw = random_raw(3, (10, 10, 10));
        let out = conform(&raw, iso(&raw)).unwrap();
        assert_eq!(*out.data.iter().min().unwrap(), 0);
        assert_eq!(*out.data.iter().max().unwrap(), 255);
    }

    #[test]
    fn anisotropic_rejected() {
        let raw = random_raw(1, (4, 4, 4));
        let err = conform(&raw, [1.0, 1.0, 1.2]).unwrap_err();
        assert!(matches!(err, DataError::Anisotropic(_)));
    }
}
