//! On-disk case layout and the dataset split manifest.
//!
//! A case is a directory `<case_id>/` holding one `<modality>.nii.gz` per
//! channel plus `seg.nii.gz`. Label files use the BraTS palette
//! `{0,1,2,4}`; the enhancing class is remapped 4 <-> 3 here, at the I/O
//! boundary, and nowhere else.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::nifti;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volumes::{MultiModalVolume, SegmentationMap};

pub const SEG_FILE: &str = "seg.nii.gz";

/// Map internal labels {0,1,2,3} to the BraTS file palette {0,1,2,4}.
pub fn labels_to_brats(labels: &Tensor<u8>) -> Tensor<u8> {
    let data = labels.data().iter().map(|&l| if l == 3 { 4 } else { l }).collect();
    Tensor::from_vec(labels.shape(), data).expect("same shape")
}

/// Map the BraTS file palette {0,1,2,4} to internal labels {0,1,2,3}.
pub fn labels_from_brats(labels: &Tensor<u8>) -> Result<Tensor<u8>> {
    let mut data = Vec::with_capacity(labels.len());
    for &l in labels.data() {
        data.push(match l {
            0 | 1 | 2 => l,
            4 => 3,
            other => {
                return Err(Error::Data(format!(
                    "label file value {other} outside {{0,1,2,4}}"
                )))
            }
        });
    }
    Tensor::from_vec(labels.shape(), data)
}

/// Write one case directory: per-modality NIfTI volumes plus labels.
pub fn save_case<T: Scalar>(
    case_dir: &Path,
    vol: &MultiModalVolume<T>,
    seg: Option<&SegmentationMap>,
) -> Result<()> {
    std::fs::create_dir_all(case_dir)?;
    for (name, channel) in vol.channels() {
        nifti::write_nifti_f32(
            &case_dir.join(format!("{name}.nii.gz")),
            channel,
            vol.spacing(),
        )?;
    }
    if let Some(seg) = seg {
        save_labels(&case_dir.join(SEG_FILE), seg, vol.spacing())?;
    }
    Ok(())
}

/// Write a label map in the BraTS file palette.
pub fn save_labels(path: &Path, seg: &SegmentationMap, spacing: &[f64]) -> Result<()> {
    nifti::write_nifti_u8(path, &labels_to_brats(seg.labels()), spacing)
}

/// Read a label map, remapping from the BraTS file palette.
pub fn load_labels(path: &Path) -> Result<SegmentationMap> {
    let vol = nifti::read_nifti(path)?;
    SegmentationMap::new(labels_from_brats(&vol.to_labels()?)?)
}

/// Load the named modalities of a case (only those files are opened).
pub fn load_case<T: Scalar>(
    case_dir: &Path,
    modalities: &[String],
) -> Result<MultiModalVolume<T>> {
    let mut channels = Vec::with_capacity(modalities.len());
    let mut spacing: Option<Vec<f64>> = None;
    for name in modalities {
        let path = case_dir.join(format!("{name}.nii.gz"));
        let vol = nifti::read_nifti(&path)?;
        if spacing.is_none() {
            spacing = Some(vol.spacing.clone());
        }
        channels.push((name.clone(), vol.to_tensor::<T>()));
    }
    let mut out = MultiModalVolume::new(channels)?;
    if let Some(s) = spacing {
        out.set_spacing(s);
    }
    Ok(out)
}

/// Load a case's ground-truth labels if present.
pub fn load_case_labels(case_dir: &Path) -> Result<SegmentationMap> {
    load_labels(&case_dir.join(SEG_FILE))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// The dataset split manifest: case id -> split name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub cases: BTreeMap<String, Split>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn write(&self, dataset_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dataset_dir)?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dataset_dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn read(dataset_dir: &Path) -> Result<Manifest> {
        let path = dataset_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Case ids of one split, in sorted order.
    pub fn split_cases(&self, split: Split) -> Vec<String> {
        self.cases
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let count = |sp| self.cases.values().filter(|&&s| s == sp).count();
        (count(Split::Train), count(Split::Val), count(Split::Test))
    }
}

/// Case directories under a dataset root, sorted by id.
pub fn case_dirs(dataset_dir: &Path, ids: &[String]) -> Vec<PathBuf> {
    ids.iter().map(|id| dataset_dir.join(id)).collect()
}
