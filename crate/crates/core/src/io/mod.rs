//! File formats: NIfTI-1 volumes, the raw sidecar container, checkpoint
//! archives, dataset case layout, and overlay images.

pub mod cases;
pub mod checkpoint;
pub mod nifti;
pub mod overlay;
pub mod rawvol;
