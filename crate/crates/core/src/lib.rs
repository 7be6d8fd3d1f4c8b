//! Hierarchical adversarial distillation for segmentation with a missing
//! input modality, end to end: phantom data synthesis, preprocessing, the
//! teacher/student networks and patch discriminators, both training stages,
//! MC-dropout uncertainty, and Dice/significance evaluation.
//!
//! All numeric kernels are generic over the [`scalar::Scalar`] type; the
//! aliases below fix the concrete precision used by the CLI (`f32`) and by
//! verification code (`f64`).

pub mod config;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod train;
pub mod uncertainty;
pub mod volumes;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Precision used by the CLI pipeline.
pub type Real = f32;
/// Precision used by gradient verification.
pub type Verif = f64;

pub type TensorR = tensor::Tensor<Real>;
pub type SegNetR = nets::SegNet<Real>;
pub type DiscriminatorR = nets::PatchDiscriminator<Real>;
pub type VolumeR = volumes::MultiModalVolume<Real>;
