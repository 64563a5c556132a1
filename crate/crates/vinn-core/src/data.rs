//! Volumes, label tables, phantom rendering, plane slicing, and persistence.
//!
//! Everything the training and evaluation stacks consume comes from here:
//! procedurally rendered multi-resolution phantoms with exact analytic ground
//! truth, the conform step that normalizes intensities to `[0, 255]`, per-plane
//! slice datasets (with merged labels for the sagittal view), and the binary
//! volume / checkpoint file formats.

mod checkpoint;
mod conform;
mod labels;
mod manifest;
mod phantom;
mod slices;
mod volume;

pub use checkpoint::{
    check_compatible, load_checkpoint, load_checkpoint_for_spec, restore_model, save_checkpoint,
    Checkpoint, CheckpointError, TensorDiff,
};
pub use conform::conform;
pub use labels::{Hemisphere, LabelEntry, LabelTable, Tissue};
pub use manifest::{Manifest, ManifestEntry, Split};
pub use phantom::{majority_vote_downsample, render_phantom, PhantomSpec, SulcusSpec};
pub use slices::{filter_empty, plane_dataset, restack, slice_volume, SliceSample, SliceSet};
pub use volume::{
    load_intensity, load_labels, save_intensity, save_labels, IntensityVolume, LabelVolume,
    RawVolume, VOLUME_VOXEL_MM,
};

use thiserror::Error;

/// Errors shared across volume construction, conforming, and rendering.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("voxel size {0} mm is outside the supported range")]
    BadVoxelSize(f64),
    #[error("anisotropic voxel size {0:?} mm rejected; conform requires isotropic input")]
    Anisotropic([f64; 3]),
    #[error("volume is empty")]
    EmptyVolume,
    #[error("label id {0} is not present in the label table")]
    UnknownLabel(u16),
    #[error("volume file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
