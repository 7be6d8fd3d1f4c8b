//! Data augmentation: random axis flips plus mild random affine transforms
//! (rotations up to ±10 degrees, isotropic scale 0.9-1.1, no shear).
//! Intensities resample linearly; labels and the brain mask resample
//! nearest-neighbour. Every channel and the label map get the identical
//! transform.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volumes::{MultiModalVolume, SegmentationMap};

pub const MAX_ROTATION_DEG: f64 = 10.0;
pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    /// Flip per axis.
    pub flips: Vec<bool>,
    /// Rotation angles in radians: one for rank 2, three (about each axis)
    /// for rank 3.
    pub angles: Vec<f64>,
    /// Isotropic scale factor.
    pub scale: f64,
}

impl AugmentParams {
    pub fn identity(rank: usize) -> Self {
        AugmentParams {
            flips: vec![false; rank],
            angles: vec![0.0; if rank == 2 { 1 } else { 3 }],
            scale: 1.0,
        }
    }

    pub fn is_identity_affine(&self) -> bool {
        self.angles.iter().all(|&a| a == 0.0) && self.scale == 1.0
    }

    pub fn draw(rank: usize, rng: &mut ChaCha12Rng) -> Self {
        let flips = (0..rank).map(|_| rng.random::<bool>()).collect();
        let max_rad = MAX_ROTATION_DEG.to_radians();
        let n_angles = if rank == 2 { 1 } else { 3 };
        let angles = (0..n_angles)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * max_rad)
            .collect();
        let scale = SCALE_RANGE.0 + rng.random::<f64>() * (SCALE_RANGE.1 - SCALE_RANGE.0);
        AugmentParams {
            flips,
            angles,
            scale,
        }
    }

    /// Row-major rotation-and-scale matrix of the forward transform.
    fn matrix(&self, rank: usize) -> Vec<f64> {
        let s = self.scale;
        if rank == 2 {
            let (sin, cos) = self.angles[0].sin_cos();
            vec![s * cos, -s * sin, s * sin, s * cos]
        } else {
            let (sa, ca) = self.angles[0].sin_cos();
            let (sb, cb) = self.angles[1].sin_cos();
            let (sc, cc) = self.angles[2].sin_cos();
            // R = Rz(c) * Ry(b) * Rx(a), scaled.
            let r = [
                cb * cc,
                sa * sb * cc - ca * sc,
                ca * sb * cc + sa * sc,
                cb * sc,
                sa * sb * sc + ca * cc,
                ca * sb * sc - sa * cc,
                -sb,
                sa * cb,
                ca * cb,
            ];
            r.iter().map(|v| v * s).collect()
        }
    }
}

fn flip_indices<E: Copy + Default>(t: &Tensor<E>, flips: &[bool]) -> Tensor<E> {
    let dims = t.shape().to_vec();
    if flips.iter().all(|&f| !f) {
        return t.clone();
    }
    let mut out = Tensor::zeros(&dims);
    let strides = t.strides();
    let n = t.len();
    let src = t.data();
    let dst = out.data_mut();
    let rank = dims.len();
    let mut pos = vec![0usize; rank];
    for (flat, d) in dst.iter_mut().enumerate() {
        let mut rem = flat;
        for a in 0..rank {
            pos[a] = rem / strides[a];
            rem %= strides[a];
        }
        let mut src_flat = 0;
        for a in 0..rank {
            let p = if flips[a] { dims[a] - 1 - pos[a] } else { pos[a] };
            src_flat += p * strides[a];
        }
        *d = src[src_flat];
    }
    debug_assert_eq!(n, dst.len());
    out
}

/// Inverse-map the affine part: for each output voxel, the source coordinate.
fn source_coords(dims: &[usize], params: &AugmentParams) -> Vec<f64> {
    let rank = dims.len();
    let m = params.matrix(rank);
    // Invert: orthonormal rotation scaled by s, so inverse = transpose / s^2.
    let s2 = params.scale * params.scale;
    let inv: Vec<f64> = match rank {
        2 => vec![m[0] / s2, m[2] / s2, m[1] / s2, m[3] / s2],
        _ => vec![
            m[0] / s2,
            m[3] / s2,
            m[6] / s2,
            m[1] / s2,
            m[4] / s2,
            m[7] / s2,
            m[2] / s2,
            m[5] / s2,
            m[8] / s2,
        ],
    };
    let center: Vec<f64> = dims.iter().map(|&d| (d as f64 - 1.0) / 2.0).collect();
    let n: usize = dims.iter().product();
    let mut coords = vec![0.0; n * rank];
    let mut pos = vec![0usize; rank];
    for flat in 0..n {
        let mut rem = flat;
        for a in (0..rank).rev() {
            pos[a] = rem % dims[a];
            rem /= dims[a];
        }
        for a in 0..rank {
            let mut acc = 0.0;
            for b in 0..rank {
                acc += inv[a * rank + b] * (pos[b] as f64 - center[b]);
            }
            coords[flat * rank + a] = acc + center[a];
        }
    }
    coords
}

fn resample_linear<T: Scalar>(t: &Tensor<T>, coords: &[f64]) -> Tensor<T> {
    let dims = t.shape().to_vec();
    let rank = dims.len();
    let mut out = Tensor::zeros(&dims);
    let src = t.data();
    let dst = out.data_mut();
    let strides = t.strides();
    for (flat, d) in dst.iter_mut().enumerate() {
        let c = &coords[flat * rank..(flat + 1) * rank];
        // Accumulate over the 2^rank corner combination.
        let mut acc = 0.0f64;
        let corners = 1usize << rank;
        for corner in 0..corners {
            let mut w = 1.0f64;
            let mut idx = 0usize;
            let mut inside = true;
            for a in 0..rank {
                let lo = c[a].floor();
                let frac = c[a] - lo;
                let (p, wa) = if corner & (1 << a) == 0 {
                    (lo as isize, 1.0 - frac)
                } else {
                    (lo as isize + 1, frac)
                };
                if wa == 0.0 {
                    w = 0.0;
                    break;
                }
                if p < 0 || p as usize >= dims[a] {
                    inside = false;
                    break;
                }
                idx += p as usize * strides[a];
                w *= wa;
            }
            if inside && w > 0.0 {
                acc += w * src[idx].to_f64_lossy();
            }
        }
        *d = T::from_f64(acc);
    }
    out
}

fn resample_nearest<E: Copy + Default>(t: &Tensor<E>, coords: &[f64], fill: E) -> Tensor<E> {
    let dims = t.shape().to_vec();
    let rank = dims.len();
    let mut out = Tensor::filled(&dims, fill);
    let src = t.data();
    let dst = out.data_mut();
    let strides = t.strides();
    for (flat, d) in dst.iter_mut().enumerate() {
        let c = &coords[flat * rank..(flat + 1) * rank];
        let mut idx = 0usize;
        let mut inside = true;
        for a in 0..rank {
            let p = c[a].round() as isize;
            if p < 0 || p as usize >= dims[a] {
                inside = false;
                break;
            }
            idx += p as usize * strides[a];
        }
        if inside {
            *d = src[idx];
        }
    }
    out
}

/// Apply fixed augmentation parameters to a (volume, labels) sample.
pub fn apply_augment<T: Scalar>(
    vol: &MultiModalVolume<T>,
    seg: &SegmentationMap,
    params: &AugmentParams,
) -> Result<(MultiModalVolume<T>, SegmentationMap)> {
    let dims = vol.dims().to_vec();
    // Flips are exact index permutations; apply them first.
    let mut channels: Vec<(String, Tensor<T>)> = vol
        .channels()
        .iter()
        .map(|(n, t)| (n.clone(), flip_indices(t, &params.flips)))
        .collect();
    let mut mask = flip_indices(vol.brain_mask(), &params.flips);
    let mut labels = flip_indices(seg.labels(), &params.flips);

    if !params.is_identity_affine() {
        let coords = source_coords(&dims, params);
        for (_, t) in channels.iter_mut() {
            *t = resample_linear(t, &coords);
        }
        mask = resample_nearest(&mask, &coords, false);
        labels = resample_nearest(&labels, &coords, 0u8);
    }

    let mut out = MultiModalVolume::with_mask(channels, mask)?;
    out.set_spacing(vol.spacing().to_vec());
    Ok((out, SegmentationMap::new(labels)?))
}

/// Draw parameters from the stream and apply them.
pub fn augment<T: Scalar>(
    vol: &MultiModalVolume<T>,
    seg: &SegmentationMap,
    rng: &mut ChaCha12Rng,
) -> Result<(MultiModalVolume<T>, SegmentationMap)> {
    let params = AugmentParams::draw(vol.rank(), rng);
    apply_augment(vol, seg, &params)
}
