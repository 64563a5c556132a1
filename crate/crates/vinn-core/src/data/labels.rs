//! Label tables: class ids, hemisphere tags, and the merged (sagittal) view.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::DataError;

/// Which side of the midline a class belongs to, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hemisphere {
    Left,
    Right,
    None,
}

/// Coarse tissue kind, used to derive masks and lateral pairs from the table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tissue {
    Background,
    Csf,
    WhiteMatter,
    GrayMatter,
    Subcortical,
    Brainstem,
}

/// One class in a label table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelEntry {
    pub id: u16,
    pub name: String,
    pub hemisphere: Hemisphere,
    pub tissue: Tissue,
    /// Class id in the merged (sagittal) table; lateral pairs share one.
    pub merged_id: u16,
}

/// The class vocabulary of a dataset, with the lateralization merge mapping.
///
/// Entries are stored in id order and ids are dense starting at 0, with 0
/// reserved for background. Merged ids are dense as well, so the sagittal
/// network can be built with `num_merged_classes()` output channels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelTable {
    entries: Vec<LabelEntry>,
}

impl LabelTable {
    /// The desk-scale table: background, CSF, lateralized WM/GM/blob pairs,
    /// and a midline brainstem class. Nine classes, six after merging.
    pub fn desk() -> LabelTable {
        use Hemisphere as H;
        use Tissue as T;
        let mk = |id, name: &str, hemisphere, tissue, merged_id| LabelEntry {
            id,
            name: name.to_string(),
            hemisphere,
            tissue,
            merged_id,
        };
        LabelTable {
            entries: vec![
                mk(0, "background", H::None, T::Background, 0),
                mk(1, "csf", H::None, T::Csf, 1),
                mk(2, "left-white-matter", H::Left, T::WhiteMatter, 2),
                mk(3, "right-white-matter", H::Right, T::WhiteMatter, 2),
                mk(4, "left-gray-matter", H::Left, T::GrayMatter, 3),
                mk(5, "right-gray-matter", H::Right, T::GrayMatter, 3),
                mk(6, "left-blob", H::Left, T::Subcortical, 4),
                mk(7, "right-blob", H::Right, T::Subcortical, 4),
                mk(8, "brainstem", H::None, T::Brainstem, 5),
            ],
        }
    }

    pub fn entries(&self) -> &[LabelEntry] {
        &self.entries
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    /// Number of distinct merged ids (the sagittal class count).
    pub fn num_merged_classes(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.merged_id as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn entry(&self, id: u16) -> Result<&LabelEntry, DataError> {
        self.entries
            .get(id as usize)
            .filter(|e| e.id == id)
            .ok_or(DataError::UnknownLabel(id))
    }

    pub fn merged_id(&self, id: u16) -> Result<u16, DataError> {
        Ok(self.entry(id)?.merged_id)
    }

    /// Map a label array through the merge table (lateral pairs collapse).
    pub fn map_to_merged(&self, labels: &Array3<u16>) -> Result<Array3<u16>, DataError> {
        let lut: Vec<u16> = self.entries.iter().map(|e| e.merged_id).collect();
        let mut out = labels.clone();
        for v in out.iter_mut() {
            let i = *v as usize;
            if i >= lut.len() {
                return Err(DataError::UnknownLabel(*v));
            }
            *v = lut[i];
        }
        Ok(out)
    }

    /// White-matter ids for one hemisphere, used to restore laterality.
    pub fn wm_ids(&self, hemisphere: Hemisphere) -> Vec<u16> {
        self.entries
            .iter()
            .filter(|e| e.tissue == Tissue::WhiteMatter && e.hemisphere == hemisphere)
            .map(|e| e.id)
            .collect()
    }

    /// Gray-matter ids (both hemispheres), for loss-mask construction.
    pub fn gm_ids(&self) -> Vec<u16> {
        self.entries
            .iter()
            .filter(|e| e.tissue == Tissue::GrayMatter)
            .map(|e| e.id)
            .collect()
    }

    /// Ids counted as brain tissue (everything but background and CSF).
    pub fn brain_ids(&self) -> Vec<u16> {
        self.entries
            .iter()
            .filter(|e| !matches!(e.tissue, Tissue::Background | Tissue::Csf))
            .map(|e| e.id)
            .collect()
    }

    /// `(left, right)` id pairs that share a merged id.
    pub fn lateral_pairs(&self) -> Vec<(u16, u16)> {
        let mut pairs = Vec::new();
        for l in self.entries.iter().filter(|e| e.hemisphere == Hemisphere::Left) {
            if let Some(r) = self
                .entries
                .iter()
                .find(|e| e.hemisphere == Hemisphere::Right && e.merged_id == l.merged_id)
            {
                pairs.push((l.id, r.id));
            }
        }
        pairs
    }

    /// Merged ids that expand to a lateral pair (the ones laterality
    /// restoration has to disambiguate).
    pub fn lateralized_merged_ids(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self
            .lateral_pairs()
            .iter()
            .map(|&(l, _)| self.entries[l as usize].merged_id)
            .collect();
        ids.dedup();
        ids
    }

    /// Validate that every id in `labels` is in the table.
    pub fn check_labels(&self, labels: &Array3<u16>) -> Result<(), DataError> {
        let n = self.entries.len() as u16;
        match labels.iter().find(|&&v| v >= n) {
            Some(&v) => Err(DataError::UnknownLabel(v)),
            None => Ok(()),
        }
    }
}
