//! Minimal NIfTI-1 reader/writer for single-file `.nii` / `.nii.gz` volumes.
//!
//! Supports the datatypes this pipeline produces and consumes (uint8, int16,
//! float32, float64), honors `scl_slope`/`scl_inter` on read, and stores
//! per-axis spacing in `pixdim`. Tensor axes are `[slowest..fastest]`, so the
//! NIfTI x axis (fastest varying) is the tensor's last axis.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

#[derive(Debug, Clone)]
pub struct NiftiVolume {
    /// Tensor shape, slowest axis first.
    pub dims: Vec<usize>,
    /// Spacing per tensor axis (same order as `dims`).
    pub spacing: Vec<f64>,
    pub data: NiftiData,
}

#[derive(Debug, Clone)]
pub enum NiftiData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl NiftiVolume {
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = match &self.data {
            NiftiData::U8(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            NiftiData::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            NiftiData::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
        };
        Tensor::from_vec(&self.dims, data).expect("dims match payload")
    }

    pub fn to_labels(&self) -> Result<Tensor<u8>> {
        let data: Vec<u8> = match &self.data {
            NiftiData::U8(v) => v.clone(),
            NiftiData::F32(v) => v.iter().map(|&x| x as u8).collect(),
            NiftiData::F64(v) => v.iter().map(|&x| x as u8).collect(),
        };
        Tensor::from_vec(&self.dims, data)
            .map_err(|e| Error::Format(format!("label volume: {e}")))
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().map(|e| e == "gz").unwrap_or(false)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut bytes = Vec::new();
    if is_gz(path) {
        MultiGzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes)?;
    } else {
        BufReader::new(file).read_to_end(&mut bytes)?;
    }
    Ok(bytes)
}

fn i16_at(bytes: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([bytes[off], bytes[off + 1]])
}

fn f32_at(bytes: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap())
}

/// Read a NIfTI-1 volume from `.nii` or `.nii.gz`.
pub fn read_nifti(path: &Path) -> Result<NiftiVolume> {
    let bytes = read_all(path)?;
    if bytes.len() < VOX_OFFSET {
        return Err(Error::Format(format!(
            "{}: truncated header ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    let sizeof_hdr = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::Format(format!(
            "{}: not little-endian NIfTI-1 (sizeof_hdr = {sizeof_hdr})",
            path.display()
        )));
    }
    let magic = &bytes[344..348];
    if &magic[..3] != b"n+1" {
        return Err(Error::Format(format!(
            "{}: unsupported magic {:?} (need single-file n+1)",
            path.display(),
            magic
        )));
    }
    let rank = i16_at(&bytes, 40) as usize;
    if !(1..=7).contains(&rank) {
        return Err(Error::Format(format!("{}: dim[0] = {rank}", path.display())));
    }
    // NIfTI dim[1] is fastest; reverse into tensor order.
    let mut nifti_dims = Vec::with_capacity(rank);
    let mut nifti_spacing = Vec::with_capacity(rank);
    for i in 0..rank {
        nifti_dims.push(i16_at(&bytes, 40 + 2 * (i + 1)) as usize);
        nifti_spacing.push(f32_at(&bytes, 76 + 4 * (i + 1)) as f64);
    }
    let dims: Vec<usize> = nifti_dims.iter().rev().copied().collect();
    let spacing: Vec<f64> = nifti_spacing.iter().rev().copied().collect();

    let datatype = i16_at(&bytes, 70);
    let vox_offset = f32_at(&bytes, 108) as usize;
    let vox_offset = vox_offset.max(VOX_OFFSET);
    let n: usize = dims.iter().product();
    let slope = f32_at(&bytes, 112);
    let inter = f32_at(&bytes, 116);
    let scaled = slope != 0.0 && (slope != 1.0 || inter != 0.0);
    let payload = &bytes[vox_offset..];

    let need = |w: usize| -> Result<()> {
        if payload.len() < n * w {
            Err(Error::Format(format!(
                "{}: payload {} bytes < {} expected",
                path.display(),
                payload.len(),
                n * w
            )))
        } else {
            Ok(())
        }
    };

    let data = match datatype {
        DT_UINT8 => {
            need(1)?;
            NiftiData::U8(payload[..n].to_vec())
        }
        DT_INT16 => {
            need(2)?;
            let vals: Vec<f32> = (0..n)
                .map(|i| i16::from_le_bytes([payload[2 * i], payload[2 * i + 1]]) as f32)
                .collect();
            NiftiData::F32(apply_scl(vals, scaled, slope, inter))
        }
        DT_FLOAT32 => {
            need(4)?;
            let vals: Vec<f32> = (0..n)
                .map(|i| f32::from_le_bytes(payload[4 * i..4 * i + 4].try_into().unwrap()))
                .collect();
            NiftiData::F32(apply_scl(vals, scaled, slope, inter))
        }
        DT_FLOAT64 => {
            need(8)?;
            let vals: Vec<f64> = (0..n)
                .map(|i| f64::from_le_bytes(payload[8 * i..8 * i + 8].try_into().unwrap()))
                .collect();
            NiftiData::F64(if scaled {
                vals.iter().map(|&v| v * slope as f64 + inter as f64).collect()
            } else {
                vals
            })
        }
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported NIfTI datatype {other}",
                path.display()
            )))
        }
    };
    Ok(NiftiVolume { dims, spacing, data })
}

fn apply_scl(vals: Vec<f32>, scaled: bool, slope: f32, inter: f32) -> Vec<f32> {
    if scaled {
        vals.into_iter().map(|v| v * slope + inter).collect()
    } else {
        vals
    }
}

fn build_header(dims: &[usize], spacing: &[f64], datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    // dim[0] = rank; dim[1] fastest = tensor's last axis.
    let rank = dims.len();
    h[40..42].copy_from_slice(&(rank as i16).to_le_bytes());
    for i in 0..7 {
        let (d, s) = if i < rank {
            (dims[rank - 1 - i] as i16, spacing[rank - 1 - i] as f32)
        } else {
            (1, 1.0)
        };
        h[42 + 2 * i..44 + 2 * i].copy_from_slice(&d.to_le_bytes());
        h[80 + 4 * i..84 + 4 * i].copy_from_slice(&s.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    h[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes()); // scl_slope
    h[252..254].copy_from_slice(&1i16.to_le_bytes()); // qform_code: scanner
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let file = File::create(path)?;
    if is_gz(path) {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?.flush()?;
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(bytes)?;
        w.flush()?;
    }
    Ok(())
}

/// Write a scalar tensor as float32 NIfTI.
pub fn write_nifti_f32<T: Scalar>(path: &Path, tensor: &Tensor<T>, spacing: &[f64]) -> Result<()> {
    let mut bytes = build_header(tensor.shape(), spacing, DT_FLOAT32, 32);
    bytes.reserve(tensor.len() * 4);
    for v in tensor.data() {
        bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    write_bytes(path, &bytes)
}

/// Write a label tensor as uint8 NIfTI.
pub fn write_nifti_u8(path: &Path, tensor: &Tensor<u8>, spacing: &[f64]) -> Result<()> {
    let mut bytes = build_header(tensor.shape(), spacing, DT_UINT8, 8);
    bytes.extend_from_slice(tensor.data());
    write_bytes(path, &bytes)
}
