//! Binary checkpoint format for network parameters.
//!
//! Layout: 8-byte magic `VINNCKPT`, little-endian u32 version (1), a u64
//! length-prefixed UTF-8 JSON header carrying the [`NetworkSpec`] and the
//! tensor directory (name, shape, trainable flag, data offset), zero padding
//! so the data section starts 64-byte aligned, then raw 32-bit little-endian
//! tensor data with every tensor offset itself a multiple of 64.
//!
//! Serialization is fully deterministic, so save → load → save produces a
//! byte-identical file; the acceptance suite relies on that for resumable
//! deterministic reruns.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, NetworkSpec};
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"VINNCKPT";
const VERSION: u32 = 1;
const ALIGN: usize = 64;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: [usize; 4],
    trainable: bool,
    /// Byte offset into the data section; always a multiple of 64.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    tensors: Vec<TensorMeta>,
}

/// A loaded checkpoint: the architecture description plus all parameters
/// (including batch-norm running statistics) in their original order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub store: ParamStore<f32>,
}

/// Named differences between an expected tensor directory and a loaded one.
#[derive(Debug, Default, Clone)]
pub struct TensorDiff {
    /// Expected but absent from the checkpoint.
    pub missing: Vec<String>,
    /// Present in the checkpoint but not expected.
    pub unexpected: Vec<String>,
    /// Present in both with different shapes: (name, expected, found).
    pub shape_mismatches: Vec<(String, [usize; 4], [usize; 4])>,
}

impl TensorDiff {
    pub fn is_empty(&self) -> bool {
        self.missing.is_empty() && self.unexpected.is_empty() && self.shape_mismatches.is_empty()
    }
}

impl fmt::Display for TensorDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for n in &self.missing {
            writeln!(f, "  missing tensor: {n}")?;
        }
        for n in &self.unexpected {
            writeln!(f, "  unexpected tensor: {n}")?;
        }
        for (n, e, g) in &self.shape_mismatches {
            writeln!(f, "  shape mismatch: {n} expected {e:?}, found {g:?}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint does not match the requested architecture:\n{diff}")]
    ArchMismatch { diff: TensorDiff },
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Write `spec` and every parameter in `store` to `path`.
pub fn save_checkpoint(
    spec: &NetworkSpec,
    store: &ParamStore<f32>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0usize;
    for (_, e) in store.iter() {
        let (a, b, c, d) = e.value.dim();
        tensors.push(TensorMeta {
            name: e.name.clone(),
            shape: [a, b, c, d],
            trainable: e.trainable,
            offset: offset as u64,
        });
        offset = align_up(offset + e.value.len() * 4);
    }
    let header = Header {
        spec: spec.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;

    let prefix = MAGIC.len() + 4 + 8 + json.len();
    let data_start = align_up(prefix);
    let mut bytes = Vec::with_capacity(data_start + offset);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.resize(data_start, 0);
    for (i, (_, e)) in store.iter().enumerate() {
        let at = data_start + header.tensors[i].offset as usize;
        bytes.resize(at, 0);
        let flat = e.value.as_standard_layout();
        for &v in flat.as_slice().expect("standard layout") {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Read a checkpoint back, preserving tensor order and trainable flags.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    let need = |n: usize| -> Result<(), CheckpointError> {
        if bytes.len() < n {
            Err(CheckpointError::Format(format!(
                "truncated file: need {n} bytes, have {}",
                bytes.len()
            )))
        } else {
            Ok(())
        }
    };
    need(MAGIC.len() + 12)?;
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::Format(format!(
            "bad magic {:?}, expected {MAGIC:?}",
            &bytes[..8.min(bytes.len())]
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    need(20 + json_len)?;
    let header: Header = serde_json::from_slice(&bytes[20..20 + json_len])?;
    let data_start = align_up(20 + json_len);

    let mut store = ParamStore::new();
    let mut names = HashSet::new();
    for t in &header.tensors {
        if !names.insert(t.name.clone()) {
            return Err(CheckpointError::Format(format!(
                "duplicate tensor name {}",
                t.name
            )));
        }
        let len: usize = t.shape.iter().product();
        if len > 100_000_000 {
            return Err(CheckpointError::Format(format!(
                "tensor {} implausibly large: {:?}",
                t.name, t.shape
            )));
        }
        let at = data_start + t.offset as usize;
        need(at + len * 4)?;
        let vals: Vec<f32> = bytes[at..at + len * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Array4::from_shape_vec((t.shape[0], t.shape[1], t.shape[2], t.shape[3]), vals)
            .expect("shape matches length");
        store.insert(t.name.clone(), value, t.trainable);
    }
    Ok(Checkpoint {
        spec: header.spec,
        store,
    })
}

/// Compare a checkpoint's tensor directory against the directory an
/// `expected` store would have; any difference is returned by name.
pub fn check_compatible(
    expected: &ParamStore<f32>,
    ckpt: &Checkpoint,
) -> Result<(), CheckpointError> {
    let mut diff = TensorDiff::default();
    for (_, e) in expected.iter() {
        match ckpt.store.id_of(&e.name) {
            None => diff.missing.push(e.name.clone()),
            Some(id) => {
                let got = ckpt.store.get(id).dim();
                let want = e.value.dim();
                if got != want {
                    diff.shape_mismatches.push((
                        e.name.clone(),
                        [want.0, want.1, want.2, want.3],
                        [got.0, got.1, got.2, got.3],
                    ));
                }
            }
        }
    }
    for (_, e) in ckpt.store.iter() {
        if expected.id_of(&e.name).is_none() {
            diff.unexpected.push(e.name.clone());
        }
    }
    if diff.is_empty() {
        Ok(())
    } else {
        Err(CheckpointError::ArchMismatch { diff })
    }
}

/// Load a checkpoint that must fit the given architecture; a mismatch is
/// rejected with a named-tensor diff report.
pub fn load_checkpoint_for_spec(
    path: &Path,
    expected: &NetworkSpec,
) -> Result<Checkpoint, CheckpointError> {
    let ckpt = load_checkpoint(path)?;
    let reference = Model::<f32>::build(expected, 0);
    check_compatible(&reference.store, &ckpt)?;
    Ok(ckpt)
}

/// Reconstruct a runnable model from a checkpoint: the layout is rebuilt
/// from the stored spec and every tensor is then overwritten by name with
/// the saved values (batch-norm running statistics included).
pub fn restore_model(ckpt: &Checkpoint) -> Result<Model<f32>, CheckpointError> {
    let mut model = Model::<f32>::build(&ckpt.spec, 0);
    check_compatible(&model.store, ckpt)?;
    let pairs: Vec<_> = model
        .store
        .iter()
        .map(|(id, e)| (id, ckpt.store.id_of(&e.name).expect("presence checked")))
        .collect();
    for (dst, src) in pairs {
        *model.store.get_mut(dst) = ckpt.store.get(src).clone();
    }
    Ok(model)
}
