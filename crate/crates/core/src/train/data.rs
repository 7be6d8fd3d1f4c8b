//! Loading dataset splits into memory with preprocessing applied.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::cases::{load_case, load_case_labels, Manifest, Split};
use crate::losses::ClassWeights;
use crate::scalar::Scalar;
use crate::volumes::{
    center_crop, center_crop_seg, zscore_normalize, CropMode, MultiModalVolume, SegmentationMap,
    NUM_CLASSES,
};

/// One preprocessed case held in memory.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub id: String,
    pub vol: MultiModalVolume<T>,
    pub seg: SegmentationMap,
}

impl<T: Scalar> Sample<T> {
    pub fn stack(&self, modalities: &[String]) -> Result<crate::tensor::Tensor<T>> {
        self.vol.stack(modalities)
    }
}

/// Load, crop (optionally) and z-score normalize every case of a split.
pub fn load_split<T: Scalar>(
    dataset_dir: &Path,
    manifest: &Manifest,
    split: Split,
    modalities: &[String],
    crop_to: Option<&[usize]>,
) -> Result<Vec<Sample<T>>> {
    let ids = manifest.split_cases(split);
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let case_dir = dataset_dir.join(&id);
        let mut vol = load_case::<T>(&case_dir, modalities)?;
        let mut seg = load_case_labels(&case_dir)?;
        if let Some(target) = crop_to {
            vol = center_crop(&vol, target, CropMode::PadThenCrop)?;
            seg = center_crop_seg(&seg, target, CropMode::PadThenCrop)?;
        }
        let (vol, warnings) = zscore_normalize(&vol)?;
        for w in warnings {
            eprintln!("warning: case {id}: degenerate channel {} zeroed", w.modality);
        }
        out.push(Sample { id, vol, seg });
    }
    Ok(out)
}

/// Per-class voxel counts over a set of samples.
pub fn label_counts<T>(samples: &[Sample<T>]) -> [usize; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    for s in samples {
        for &l in s.seg.labels().data() {
            counts[l as usize] += 1;
        }
    }
    counts
}

/// Inverse-frequency CE weights computed on the training split.
pub fn train_class_weights<T>(train: &[Sample<T>]) -> ClassWeights {
    ClassWeights::inverse_frequency(&label_counts(train))
}

/// Train/val pair used by both training stages.
#[derive(Debug)]
pub struct TrainData<T> {
    pub train: Vec<Sample<T>>,
    pub val: Vec<Sample<T>>,
}

impl<T: Scalar> TrainData<T> {
    pub fn load(
        dataset_dir: &Path,
        modalities: &[String],
        crop_to: Option<&[usize]>,
    ) -> Result<Self> {
        let manifest = Manifest::read(dataset_dir)?;
        let train = load_split(dataset_dir, &manifest, Split::Train, modalities, crop_to)?;
        let val = load_split(dataset_dir, &manifest, Split::Val, modalities, crop_to)?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config(format!(
                "empty split: {} train / {} val cases",
                train.len(),
                val.len()
            )));
        }
        Ok(TrainData { train, val })
    }
}
