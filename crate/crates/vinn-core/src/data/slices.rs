//! Per-plane slice datasets: one network trains per anatomical plane, so
//! volumes are cut along each axis, empty slices are dropped, and the
//! sagittal view passes labels through the merged table.

use ndarray::{Array2, Array3, Axis};

use super::labels::LabelTable;
use super::volume::{IntensityVolume, LabelVolume};
use super::DataError;
use crate::model::Plane;

/// One 2-D training/evaluation sample.
#[derive(Debug, Clone)]
pub struct SliceSample {
    /// Position along the slicing axis in the source volume.
    pub index: usize,
    pub image: Array2<f64>,
    pub labels: Array2<u16>,
}

/// All slices of one volume along one plane.
#[derive(Debug, Clone)]
pub struct SliceSet {
    pub plane: Plane,
    pub voxel_mm: f64,
    /// Extent of the source volume along the slicing axis.
    pub axis_dim: usize,
    pub slices: Vec<SliceSample>,
}

fn slicing_axis(plane: Plane) -> Axis {
    // Storage order is (z, y, x): axial cuts along z, coronal along y,
    // sagittal along x.
    match plane {
        Plane::Axial => Axis(0),
        Plane::Coronal => Axis(1),
        Plane::Sagittal => Axis(2),
    }
}

/// Cut a volume into all of its slices along `plane` (no filtering).
pub fn slice_volume(plane: Plane, image: &Array3<u8>, labels: &Array3<u16>) -> Vec<SliceSample> {
    assert_eq!(image.dim(), labels.dim(), "image/label dims differ");
    let axis = slicing_axis(plane);
    (0..image.len_of(axis))
        .map(|index| SliceSample {
            index,
            image: image.index_axis(axis, index).mapv(|v| v as f64),
            labels: labels.index_axis(axis, index).to_owned(),
        })
        .collect()
}

/// Drop slices whose labels are entirely background.
pub fn filter_empty(slices: Vec<SliceSample>) -> Vec<SliceSample> {
    slices
        .into_iter()
        .filter(|s| s.labels.iter().any(|&v| v != 0))
        .collect()
}

/// Build the training dataset for one plane: sagittal labels are merged
/// (lateral pairs collapse), then empty slices are removed.
pub fn plane_dataset(
    v: &IntensityVolume,
    labels: &LabelVolume,
    table: &LabelTable,
    plane: Plane,
) -> Result<SliceSet, DataError> {
    let label_data = match plane {
        Plane::Sagittal => table.map_to_merged(&labels.data)?,
        _ => {
            table.check_labels(&labels.data)?;
            labels.data.clone()
        }
    };
    let axis_dim = v.data.len_of(slicing_axis(plane));
    let slices = filter_empty(slice_volume(plane, &v.data, &label_data));
    Ok(SliceSet {
        plane,
        voxel_mm: v.voxel_mm,
        axis_dim,
        slices,
    })
}

/// Rebuild a volume from a complete slice collection (the inverse of
/// [`slice_volume`]). Every index in `0..axis_dim` must be present.
pub fn restack(
    plane: Plane,
    slices: &[SliceSample],
    axis_dim: usize,
) -> Result<(Array3<f64>, Array3<u16>), DataError> {
    let first = slices
        .first()
        .ok_or_else(|| DataError::Format("restack of empty slice list".into()))?;
    let (a, b) = first.image.dim();
    let dims = match plane {
        Plane::Axial => (axis_dim, a, b),
        Plane::Coronal => (a, axis_dim, b),
        Plane::Sagittal => (a, b, axis_dim),
    };
    let mut image = Array3::<f64>::zeros(dims);
    let mut labels = Array3::<u16>::zeros(dims);
    let mut seen = vec![false; axis_dim];
    let axis = slicing_axis(plane);
    for s in slices {
        if s.index >= axis_dim {
            return Err(DataError::Format(format!(
                "slice index {} out of range {axis_dim}",
                s.index
            )));
        }
        if std::mem::replace(&mut seen[s.index], true) {
            return Err(DataError::Format(format!("duplicate slice {}", s.index)));
        }
        image.index_axis_mut(axis, s.index).assign(&s.image);
        labels.index_axis_mut(axis, s.index).assign(&s.labels);
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(DataError::Format(format!("missing slice {missing}")));
    }
    Ok((image, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{conform, render_phantom, LabelTable, PhantomSpec};

    fn rendered() -> (IntensityVolume, LabelVolume) {
        let table = LabelTable::desk();
        let (raw, labels) = render_phantom(&PhantomSpec::desk(4), 1.0, &table).unwrap();
        let img = conform(&raw, [raw.voxel_mm; 3]).unwrap();
        (img, labels)
    }

    #[test]
    fn slice_then_restack_is_identity() {
        let (img, labels) = rendered();
        for plane in Plane::ALL {
            let slices = slice_volume(plane, &img.data, &labels.data);
            let dim = img.data.len_of(slicing_axis(plane));
            assert_eq!(slices.len(), dim);
            let (rimg, rlab) = restack(plane, &slices, dim).unwrap();
            assert_eq!(rimg, img.data.mapv(|v| v as f64));
            assert_eq!(rlab, labels.data);
        }
    }

    #[test]
    fn empty_slices_are_dropped() {
        let (img, labels) = rendered();
        let all = slice_volume(Plane::Axial, &img.data, &labels.data);
        let nonempty_by_hand = all
            .iter()
            .filter(|s| s.labels.iter().any(|&v| v != 0))
            .count();
        let kept = filter_empty(all);
        assert_eq!(kept.len(), nonempty_by_hand);
        // The halo does not reach the volume faces, so some slices must drop.
        assert!(nonempty_by_hand < img.data.len_of(Axis(0)));
        assert!(nonempty_by_hand > 0);
    }

    #[test]
    fn sagittal_dataset_uses_merged_ids() {
        let (img, labels) = rendered();
        let table = LabelTable::desk();
        let set = plane_dataset(&img, &labels, &table, Plane::Sagittal).unwrap();
        let merged_max = table.num_merged_classes() as u16;
        for s in &set.slices {
            assert!(s.labels.iter().all(|&v| v < merged_max));
        }
        // Lateralized source ids exceed the merged range, so the mapping
        // must actually have fired somewhere.
        assert!(labels.data.iter().any(|&v| v >= merged_max));
    }

    #[test]
    fn non_sagittal_dataset_keeps_full_ids() {
        let (img, labels) = rendered();
        let table = LabelTable::desk();
        let set = plane_dataset(&img, &labels, &table, Plane::Coronal).unwrap();
        let max_seen = set
            .slices
            .iter()
            .flat_map(|s| s.labels.iter().copied())
            .max()
            .unwrap();
        assert_eq!(max_seen, 8);
        assert_eq!(set.voxel_mm, 1.0);
        assert_eq!(set.axis_dim, 48);
    }

    #[test]
    fn restack_rejects_gaps_and_duplicates() {
        let (img, labels) = rendered();
        let mut slices = slice_volume(Plane::Axial, &img.data, &labels.data);
        let removed = slices.remove(3);
        assert!(restack(Plane::Axial, &slices, 48).is_err());
        slices.push(removed);
        let mut dup = slices.clone();
        dup[0].index = 5;
        assert!(restack(Plane::Axial, &dup, 48).is_err());
    }
}
