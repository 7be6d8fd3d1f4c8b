//! Multi-modality volumes, label maps, and region algebra.
//!
//! Spatial rank is 2 or 3; all channels of a volume share one spatial shape.
//! Labels are `0 = background`, `1 = necrotic/non-enhancing core`,
//! `2 = edema`, `3 = enhancing`. On-disk BraTS-style label files use `4` for
//! enhancing; the remapping happens only in the I/O layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 4;
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_NECROTIC: u8 = 1;
pub const LABEL_EDEMA: u8 = 2;
pub const LABEL_ENHANCING: u8 = 3;

/// Ordered set of named modality channels plus a brain mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalVolume<T> {
    channels: Vec<(String, Tensor<T>)>,
    brain_mask: Tensor<bool>,
    spacing: Vec<f64>,
}

impl<T: Scalar> MultiModalVolume<T> {
    /// Build a volume; the brain mask is inferred as "any channel nonzero",
    /// the convention for zero-padded skull-stripped inputs.
    pub fn new(channels: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let (first_name, first) = channels
            .first()
            .ok_or_else(|| Error::Data("volume needs at least one channel".into()))?;
        let dims = first.shape().to_vec();
        if dims.len() != 2 && dims.len() != 3 {
            return Err(Error::Shape(format!(
                "channel {first_name} has rank {} (want 2 or 3)",
                dims.len()
            )));
        }
        for (name, ch) in &channels {
            if ch.shape() != dims.as_slice() {
                return Err(Error::Shape(format!(
                    "channel {name} dims {:?} != {:?}",
                    ch.shape(),
                    dims
                )));
            }
        }
        let mut mask = Tensor::filled(&dims, false);
        for (_, ch) in &channels {
            for (m, &v) in mask.data_mut().iter_mut().zip(ch.data()) {
                *m = *m || v != T::zero();
            }
        }
        let spacing = vec![1.0; dims.len()];
        Ok(MultiModalVolume {
            channels,
            brain_mask: mask,
            spacing,
        })
    }

    pub fn with_mask(
        channels: Vec<(String, Tensor<T>)>,
        brain_mask: Tensor<bool>,
    ) -> Result<Self> {
        let mut v = Self::new(channels)?;
        if brain_mask.shape() != v.dims() {
            return Err(Error::Shape(format!(
                "mask dims {:?} != {:?}",
                brain_mask.shape(),
                v.dims()
            )));
        }
        v.brain_mask = brain_mask;
        Ok(v)
    }

    pub fn set_spacing(&mut self, spacing: Vec<f64>) {
        assert_eq!(spacing.len(), self.dims().len());
        self.spacing = spacing;
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn dims(&self) -> &[usize] {
        self.channels[0].1.shape()
    }

    pub fn rank(&self) -> usize {
        self.dims().len()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel_names(&self) -> Vec<&str> {
        self.channels.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn channel(&self, name: &str) -> Option<&Tensor<T>> {
        self.channels
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn channels(&self) -> &[(String, Tensor<T>)] {
        &self.channels
    }

    pub fn brain_mask(&self) -> &Tensor<bool> {
        &self.brain_mask
    }

    /// Stack a subset of channels (in the order given) into a
    /// `[channels, spatial...]` tensor for network input.
    pub fn stack(&self, names: &[String]) -> Result<Tensor<T>> {
        let dims = self.dims().to_vec();
        let spatial: usize = dims.iter().product();
        let mut shape = vec![names.len()];
        shape.extend_from_slice(&dims);
        let mut data = Vec::with_capacity(names.len() * spatial);
        for name in names {
            let ch = self
                .channel(name)
                .ok_or_else(|| Error::Data(format!("missing modality {name}")))?;
            data.extend_from_slice(ch.data());
        }
        Tensor::from_vec(&shape, data)
    }

    /// Keep only the named channels, preserving the given order.
    pub fn select(&self, names: &[String]) -> Result<MultiModalVolume<T>> {
        let mut channels = Vec::with_capacity(names.len());
        for name in names {
            let ch = self
                .channel(name)
                .ok_or_else(|| Error::Data(format!("missing modality {name}")))?;
            channels.push((name.clone(), ch.clone()));
        }
        let mut out = MultiModalVolume::with_mask(channels, self.brain_mask.clone())?;
        out.spacing = self.spacing.clone();
        Ok(out)
    }
}

/// Integer label volume over the 4-class palette.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    labels: Tensor<u8>,
}

impl SegmentationMap {
    pub fn new(labels: Tensor<u8>) -> Result<Self> {
        if let Some(&bad) = labels.data().iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!(
                "label {bad} outside {{0,1,2,3}}"
            )));
        }
        Ok(SegmentationMap { labels })
    }

    pub fn labels(&self) -> &Tensor<u8> {
        &self.labels
    }

    pub fn dims(&self) -> &[usize] {
        self.labels.shape()
    }

    pub fn count_label(&self, label: u8) -> usize {
        self.labels.data().iter().filter(|&&v| v == label).count()
    }
}

/// Tumour sub-region: a named subset of the lesion labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionSpec {
    /// Whole tumour: labels {1,2,3}.
    WT,
    /// Tumour core: labels {1,3}.
    TC,
    /// Enhancing tumour: label {3}.
    ET,
}

pub const ALL_REGIONS: [RegionSpec; 3] = [RegionSpec::WT, RegionSpec::TC, RegionSpec::ET];

impl RegionSpec {
    pub fn label_set(self) -> &'static [u8] {
        match self {
            RegionSpec::WT => &[1, 2, 3],
            RegionSpec::TC => &[1, 3],
            RegionSpec::ET => &[3],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RegionSpec::WT => "WT",
            RegionSpec::TC => "TC",
            RegionSpec::ET => "ET",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "WT" => Ok(RegionSpec::WT),
            "TC" => Ok(RegionSpec::TC),
            "ET" => Ok(RegionSpec::ET),
            other => Err(Error::Config(format!("unknown region {other:?}"))),
        }
    }

    #[inline]
    pub fn contains(self, label: u8) -> bool {
        match self {
            RegionSpec::WT => label >= 1,
            RegionSpec::TC => label == 1 || label == 3,
            RegionSpec::ET => label == 3,
        }
    }
}

/// Boolean mask of voxels whose label belongs to the region.
pub fn region_mask(seg: &SegmentationMap, region: RegionSpec) -> Tensor<bool> {
    let mut out = Tensor::filled(seg.dims(), false);
    for (m, &l) in out.data_mut().iter_mut().zip(seg.labels().data()) {
        *m = region.contains(l);
    }
    out
}

/// Crop behaviour when a target axis exceeds the input axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CropMode {
    /// Reject targets larger than the input.
    Strict,
    /// Zero-pad symmetrically first, then crop; padding value 0 matches the
    /// outside-brain convention.
    PadThenCrop,
}

/// Per-axis crop offsets: `floor((in - out) / 2)`.
pub fn crop_offsets(in_dims: &[usize], out_dims: &[usize]) -> Vec<usize> {
    in_dims
        .iter()
        .zip(out_dims)
        .map(|(&i, &o)| (i - o) / 2)
        .collect()
}

fn crop_indices(in_dims: &[usize], target: &[usize], mode: CropMode) -> Result<Vec<Vec<isize>>> {
    if in_dims.len() != target.len() {
        return Err(Error::Shape(format!(
            "crop target rank {} != input rank {}",
            target.len(),
            in_dims.len()
        )));
    }
    if target.iter().any(|&t| t == 0) {
        return Err(Error::Shape("crop target has a zero axis".into()));
    }
    let mut axes = Vec::with_capacity(in_dims.len());
    for (axis, (&n, &t)) in in_dims.iter().zip(target).enumerate() {
        if t > n && mode == CropMode::Strict {
            return Err(Error::Shape(format!(
                "axis {}: crop target {} exceeds input {}",
                axis + 1,
                t,
                n
            )));
        }
        // Source index per output position; negative or >= n means padding.
        let (off, pad_lo) = if t <= n {
            (((n - t) / 2) as isize, 0isize)
        } else {
            (0, ((t - n) / 2) as isize)
        };
        axes.push((0..t as isize).map(|o| o - pad_lo + off).collect());
    }
    Ok(axes)
}

fn gather<E: Copy + Default>(src: &Tensor<E>, axes: &[Vec<isize>], fill: E) -> Tensor<E> {
    let in_dims = src.shape().to_vec();
    let out_dims: Vec<usize> = axes.iter().map(|a| a.len()).collect();
    let mut out = Tensor::filled(&out_dims, fill);
    let in_strides: Vec<usize> = {
        let mut s = vec![1usize; in_dims.len()];
        for i in (0..in_dims.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * in_dims[i + 1];
        }
        s
    };
    let total: usize = out_dims.iter().product();
    let odata = out.data_mut();
    let sdata = src.data();
    for flat in 0..total {
        let mut rem = flat;
        let mut src_flat = 0isize;
        let mut inside = true;
        for (axis, &dim) in out_dims.iter().enumerate() {
            let pos = rem / out_dims[axis + 1..].iter().product::<usize>().max(1);
            rem %= out_dims[axis + 1..].iter().product::<usize>().max(1);
            let _ = dim;
            let s = axes[axis][pos];
            if s < 0 || s as usize >= in_dims[axis] {
                inside = false;
                break;
            }
            src_flat += s * in_strides[axis] as isize;
        }
        if inside {
            odata[flat] = sdata[src_flat as usize];
        }
    }
    out
}

/// Center-crop (optionally pad-then-crop) every channel and the mask.
pub fn center_crop<T: Scalar>(
    vol: &MultiModalVolume<T>,
    target: &[usize],
    mode: CropMode,
) -> Result<MultiModalVolume<T>> {
    let axes = crop_indices(vol.dims(), target, mode)?;
    let channels = vol
        .channels()
        .iter()
        .map(|(n, t)| (n.clone(), gather(t, &axes, T::zero())))
        .collect();
    let mask = gather(vol.brain_mask(), &axes, false);
    let mut out = MultiModalVolume::with_mask(channels, mask)?;
    out.set_spacing(vol.spacing().to_vec());
    Ok(out)
}

/// Center-crop a label map with the same index arithmetic as volumes.
pub fn center_crop_seg(
    seg: &SegmentationMap,
    target: &[usize],
    mode: CropMode,
) -> Result<SegmentationMap> {
    let axes = crop_indices(seg.dims(), target, mode)?;
    SegmentationMap::new(gather(seg.labels(), &axes, 0))
}

/// A channel whose intensities were constant inside the mask; its output was
/// zeroed instead of divided by ~0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DegenerateChannel {
    pub modality: String,
}

/// Per-channel z-score over the brain mask (population std); voxels outside
/// the mask are set to exactly 0.
pub fn zscore_normalize<T: Scalar>(
    vol: &MultiModalVolume<T>,
) -> Result<(MultiModalVolume<T>, Vec<DegenerateChannel>)> {
    let mask = vol.brain_mask();
    let n_mask = mask.data().iter().filter(|&&m| m).count();
    if n_mask == 0 {
        return Err(Error::Data("z-score: empty brain mask".into()));
    }
    let n = n_mask as f64;
    let mut warnings = Vec::new();
    let mut channels = Vec::with_capacity(vol.num_channels());
    for (name, ch) in vol.channels() {
        // Statistics accumulate in f64 so f32 volumes normalize accurately.
        let mut sum = 0.0f64;
        for (&v, &m) in ch.data().iter().zip(mask.data()) {
            if m {
                sum += v.to_f64_lossy();
            }
        }
        let mean = sum / n;
        let mut ss = 0.0f64;
        for (&v, &m) in ch.data().iter().zip(mask.data()) {
            if m {
                let d = v.to_f64_lossy() - mean;
                ss += d * d;
            }
        }
        let std = (ss / n).sqrt();
        let mut out = Tensor::zeros(ch.shape());
        if std < 1e-8 {
            warnings.push(DegenerateChannel {
                modality: name.clone(),
            });
        } else {
            for ((o, &v), &m) in out.data_mut().iter_mut().zip(ch.data()).zip(mask.data()) {
                if m {
                    *o = T::from_f64((v.to_f64_lossy() - mean) / std);
                }
            }
        }
        channels.push((name.clone(), out));
    }
    let mut out = MultiModalVolume::with_mask(channels, mask.clone())?;
    out.set_spacing(vol.spacing().to_vec());
    Ok((out, warnings))
}
