//! Simple raw volume container for synthetic data: a little-endian payload
//! (`<stem>.raw`) plus a sidecar text header (`<stem>.rawhdr`) listing dims,
//! dtype and modality name.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct RawHeader {
    pub dtype: String,
    pub dims: Vec<usize>,
    pub modality: String,
}

fn header_path(stem: &Path) -> std::path::PathBuf {
    stem.with_extension("rawhdr")
}

fn payload_path(stem: &Path) -> std::path::PathBuf {
    stem.with_extension("raw")
}

fn render_header(h: &RawHeader) -> String {
    let dims = h
        .dims
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(" ");
    format!(
        "format: rawvol-v1\ndtype: {}\ndims: {}\nmodality: {}\n",
        h.dtype, dims, h.modality
    )
}

pub fn read_raw_header(stem: &Path) -> Result<RawHeader> {
    let text = std::fs::read_to_string(header_path(stem))
        .map_err(|e| Error::Data(format!("{}: {e}", header_path(stem).display())))?;
    let mut dtype = None;
    let mut dims = None;
    let mut modality = None;
    let mut format_ok = false;
    for line in text.lines() {
        let Some((key, value)) = line.split_once(':') else {
            continue;
        };
        let value = value.trim();
        match key.trim() {
            "format" => format_ok = value == "rawvol-v1",
            "dtype" => dtype = Some(value.to_string()),
            "dims" => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    value.split_whitespace().map(str::parse).collect();
                dims = Some(parsed.map_err(|e| Error::Format(format!("bad dims: {e}")))?);
            }
            "modality" => modality = Some(value.to_string()),
            _ => {}
        }
    }
    if !format_ok {
        return Err(Error::Format("rawvol header missing `format: rawvol-v1`".into()));
    }
    Ok(RawHeader {
        dtype: dtype.ok_or_else(|| Error::Format("rawvol header missing dtype".into()))?,
        dims: dims.ok_or_else(|| Error::Format("rawvol header missing dims".into()))?,
        modality: modality.ok_or_else(|| Error::Format("rawvol header missing modality".into()))?,
    })
}

/// Write a real-valued volume as float32 payload + header.
pub fn write_raw_f32<T: Scalar>(stem: &Path, tensor: &Tensor<T>, modality: &str) -> Result<()> {
    if let Some(parent) = stem.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let header = RawHeader {
        dtype: "f32".into(),
        dims: tensor.shape().to_vec(),
        modality: modality.into(),
    };
    std::fs::write(header_path(stem), render_header(&header))?;
    let mut bytes = Vec::with_capacity(tensor.len() * 4);
    for v in tensor.data() {
        bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    std::fs::write(payload_path(stem), bytes)?;
    Ok(())
}

/// Write a label volume as uint8 payload + header.
pub fn write_raw_u8(stem: &Path, tensor: &Tensor<u8>, modality: &str) -> Result<()> {
    if let Some(parent) = stem.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let header = RawHeader {
        dtype: "u8".into(),
        dims: tensor.shape().to_vec(),
        modality: modality.into(),
    };
    std::fs::write(header_path(stem), render_header(&header))?;
    std::fs::write(payload_path(stem), tensor.data())?;
    Ok(())
}

pub fn read_raw_f32<T: Scalar>(stem: &Path) -> Result<(RawHeader, Tensor<T>)> {
    let header = read_raw_header(stem)?;
    if header.dtype != "f32" {
        return Err(Error::Format(format!("expected f32 payload, got {}", header.dtype)));
    }
    let bytes = std::fs::read(payload_path(stem))?;
    let n: usize = header.dims.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Format(format!(
            "raw payload {} bytes, expected {}",
            bytes.len(),
            n * 4
        )));
    }
    let data = (0..n)
        .map(|i| T::from_f64(f32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as f64))
        .collect();
    Ok((header.clone(), Tensor::from_vec(&header.dims, data)?))
}

pub fn read_raw_u8(stem: &Path) -> Result<(RawHeader, Tensor<u8>)> {
    let header = read_raw_header(stem)?;
    if header.dtype != "u8" {
        return Err(Error::Format(format!("expected u8 payload, got {}", header.dtype)));
    }
    let bytes = std::fs::read(payload_path(stem))?;
    let n: usize = header.dims.iter().product();
    if bytes.len() != n {
        return Err(Error::Format(format!(
            "raw payload {} bytes, expected {n}",
            bytes.len()
        )));
    }
    Ok((header.clone(), Tensor::from_vec(&header.dims, bytes)?))
}
