//! Volume containers and the `VVOL` on-disk format.
//!
//! `VVOL` is a minimal headered raw format: 4-byte magic, a dtype code,
//! three dims, the isotropic voxel size, then little-endian voxel data in
//! C (row-major) order. It exists so phantom datasets survive a process
//! boundary; importing real scanner formats is out of scope.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;

use super::DataError;

const MAGIC: &[u8; 4] = b"VVOL";
const DTYPE_U8: u32 = 1;
const DTYPE_U16: u32 = 2;

/// Voxel sizes a volume may legally carry, in mm.
pub const VOLUME_VOXEL_MM: (f64, f64) = (0.5, 2.0);

/// A floating-point volume straight out of the renderer, before conform.
#[derive(Debug, Clone)]
pub struct RawVolume {
    pub voxel_mm: f64,
    pub data: Array3<f64>,
}

/// A conformed volume: canonical axis order, values in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityVolume {
    pub voxel_mm: f64,
    pub data: Array3<u8>,
}

/// Per-voxel class ids from a [`super::LabelTable`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub voxel_mm: f64,
    pub data: Array3<u16>,
}

impl LabelVolume {
    /// Physical volume of one class in mm³ (voxel count × voxel volume).
    pub fn class_volume_mm3(&self, id: u16) -> f64 {
        let n = self.data.iter().filter(|&&v| v == id).count();
        n as f64 * self.voxel_mm.powi(3)
    }
}

fn write_header<W: Write>(w: &mut W, dtype: u32, dims: (usize, usize, usize), voxel_mm: f64) -> Result<(), DataError> {
    w.write_all(MAGIC)?;
    w.write_all(&dtype.to_le_bytes())?;
    for d in [dims.0, dims.1, dims.2] {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&voxel_mm.to_le_bytes())?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<(u32, (usize, usize, usize), f64), DataError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DataError::Format(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let dtype = u32::from_le_bytes(u32b);
    let mut u64b = [0u8; 8];
    let mut dims = [0usize; 3];
    for d in &mut dims {
        r.read_exact(&mut u64b)?;
        *d = u64::from_le_bytes(u64b) as usize;
    }
    r.read_exact(&mut u64b)?;
    let voxel_mm = f64::from_le_bytes(u64b);
    if !(voxel_mm.is_finite() && voxel_mm > 0.0) {
        return Err(DataError::Format(format!("bad voxel size {voxel_mm}")));
    }
    Ok((dtype, (dims[0], dims[1], dims[2]), voxel_mm))
}

pub fn save_intensity(v: &IntensityVolume, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, DTYPE_U8, v.data.dim(), v.voxel_mm)?;
    let c = v.data.as_standard_layout();
    w.write_all(c.as_slice().expect("standard layout"))?;
    w.flush()?;
    Ok(())
}

pub fn load_intensity(path: &Path) -> Result<IntensityVolume, DataError> {
    let mut r = BufReader::new(File::open(path)?);
    let (dtype, dims, voxel_mm) = read_header(&mut r)?;
    if dtype != DTYPE_U8 {
        return Err(DataError::Format(format!(
            "dtype code {dtype} is not an intensity volume"
        )));
    }
    let n = dims.0 * dims.1 * dims.2;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    let data = Array3::from_shape_vec(dims, buf).expect("shape matches length");
    Ok(IntensityVolume { voxel_mm, data })
}

pub fn save_labels(v: &LabelVolume, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, DTYPE_U16, v.data.dim(), v.voxel_mm)?;
    let c = v.data.as_standard_layout();
    for &x in c.as_slice().expect("standard layout") {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<LabelVolume, DataError> {
    let mut r = BufReader::new(File::open(path)?);
    let (dtype, dims, voxel_mm) = read_header(&mut r)?;
    if dtype != DTYPE_U16 {
        return Err(DataError::Format(format!(
            "dtype code {dtype} is not a label volume"
        )));
    }
    let n = dims.0 * dims.1 * dims.2;
    let mut buf = vec![0u8; n * 2];
    r.read_exact(&mut buf)?;
    let vals: Vec<u16> = buf
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let data = Array3::from_shape_vec(dims, vals).expect("shape matches length");
    Ok(LabelVolume { voxel_mm, data })
}
