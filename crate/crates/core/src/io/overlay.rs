//! Flat 2D slice overlays: grayscale background from one modality with the
//! lesion classes blended on top (necrotic red, edema green, enhancing
//! yellow).

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volumes::SegmentationMap;

const CLASS_COLORS: [[u8; 3]; 4] = [
    [0, 0, 0],       // background: unused
    [220, 40, 40],   // necrotic core
    [40, 200, 60],   // edema
    [235, 220, 40],  // enhancing
];

/// Extract an axial-style slice (fixed index on the first axis) from a
/// rank-3 tensor, or pass a rank-2 tensor through.
fn slice2d<E: Copy + Default>(t: &Tensor<E>, slice_index: usize) -> Result<(usize, usize, Vec<E>)> {
    match t.shape() {
        [h, w] => Ok((*h, *w, t.data().to_vec())),
        [d, h, w] => {
            if slice_index >= *d {
                return Err(Error::Config(format!(
                    "slice {slice_index} out of range (depth {d})"
                )));
            }
            let plane = h * w;
            Ok((*h, *w, t.data()[slice_index * plane..(slice_index + 1) * plane].to_vec()))
        }
        other => Err(Error::Shape(format!("overlay needs rank 2 or 3, got {other:?}"))),
    }
}

/// Render a slice of `background` with `seg` labels alpha-blended on top and
/// write it as an RGB PNG.
pub fn write_overlay_png<T: Scalar>(
    path: &Path,
    background: &Tensor<T>,
    seg: &SegmentationMap,
    slice_index: usize,
) -> Result<()> {
    if background.shape() != seg.dims() {
        return Err(Error::Shape(format!(
            "overlay: volume dims {:?} != label dims {:?}",
            background.shape(),
            seg.dims()
        )));
    }
    let (h, w, bg) = slice2d(background, slice_index)?;
    let (_, _, labels) = slice2d(seg.labels(), slice_index)?;

    // Robust grayscale window from the slice's nonzero intensities.
    let mut vals: Vec<f64> = bg
        .iter()
        .map(|v| v.to_f64_lossy())
        .filter(|v| *v != 0.0)
        .collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (lo, hi) = if vals.is_empty() {
        (0.0, 1.0)
    } else {
        (vals[vals.len() / 20], vals[vals.len() - 1 - vals.len() / 20])
    };
    let range = (hi - lo).max(1e-9);

    let mut rgb = Vec::with_capacity(h * w * 3);
    for (v, &l) in bg.iter().zip(&labels) {
        let g = (((v.to_f64_lossy() - lo) / range).clamp(0.0, 1.0) * 255.0) as u8;
        if l == 0 {
            rgb.extend_from_slice(&[g, g, g]);
        } else {
            let c = CLASS_COLORS[l as usize];
            // 60% label color, 40% anatomy.
            let blend = |ch: u8| -> u8 { ((0.6 * ch as f64) + (0.4 * g as f64)) as u8 };
            rgb.extend_from_slice(&[blend(c[0]), blend(c[1]), blend(c[2])]);
        }
    }

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    writer
        .write_image_data(&rgb)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    Ok(())
}
