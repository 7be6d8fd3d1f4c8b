//! MC-dropout uncertainty: repeated stochastic forwards, per-voxel binary
//! entropy of the region probability normalized to 0-100, threshold
//! filtering, and the 0-1 aggregate uncertainty score.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::dice;
use crate::nets::SegNet;
use crate::rng::{self, StreamDomain};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volumes::RegionSpec;

/// The thresholds the aggregate score is defined over.
pub const SCORE_THRESHOLDS: [u32; 4] = [100, 75, 50, 25];
pub const DEFAULT_MC_SAMPLES: usize = 100;

/// Per-voxel uncertainty in `[0, 100]` for one region.
#[derive(Debug, Clone)]
pub struct UncertaintyMap {
    pub values: Tensor<f64>,
    pub region: RegionSpec,
}

/// `n` stochastic forwards with dropout active, each drawing its mask from an
/// independent substream of `seed`; deterministic given the seed.
pub fn mc_sample<T: Scalar>(
    student: &SegNet<T>,
    x_pre: &Tensor<T>,
    n: usize,
    seed: u64,
) -> Result<Vec<Tensor<T>>> {
    if student.config.dropout_p <= 0.0 {
        return Err(Error::Config(
            "MC sampling needs a network trained with dropout_p > 0".into(),
        ));
    }
    if n < 1 {
        return Err(Error::Config("MC sampling needs n >= 1".into()));
    }
    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, StreamDomain::McSample, i as u64, 0);
            student.forward(x_pre, Some(&mut rng)).map(|out| out.probs)
        })
        .collect()
}

/// Mean probability mass on the region's labels, per voxel, over samples.
pub fn mean_region_probability<T: Scalar>(
    samples: &[Tensor<T>],
    region: RegionSpec,
) -> Result<Tensor<f64>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("entropy needs >= 1 sample".into()))?;
    let num_classes = first.shape()[0];
    let spatial: usize = first.shape()[1..].iter().product();
    let mut acc = vec![0.0f64; spatial];
    for s in samples {
        if s.shape() != first.shape() {
            return Err(Error::Shape("MC samples have differing shapes".into()));
        }
        let sd = s.data();
        for label in 0..num_classes as u8 {
            if region.contains(label) {
                let base = label as usize * spatial;
                for (a, v) in acc.iter_mut().zip(&sd[base..base + spatial]) {
                    *a += v.to_f64_lossy();
                }
            }
        }
    }
    let n = samples.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    Tensor::from_vec(&first.shape()[1..], acc)
}

/// Binary entropy of `p` in nats, with `0 ln 0 = 0`.
fn binary_entropy(p: f64) -> f64 {
    let mut h = 0.0;
    if p > 0.0 {
        h -= p * p.ln();
    }
    if p < 1.0 {
        h -= (1.0 - p) * (1.0 - p).ln();
    }
    h
}

/// Voxelwise uncertainty `100 * H(p)/ln 2` of the region probability, where
/// `p` is the MC-mean probability mass on the region's labels. Needs at
/// least 2 samples to be meaningful.
pub fn entropy_uncertainty<T: Scalar>(
    samples: &[Tensor<T>],
    region: RegionSpec,
) -> Result<UncertaintyMap> {
    if samples.len() < 2 {
        return Err(Error::Config(format!(
            "entropy needs >= 2 samples, got {}",
            samples.len()
        )));
    }
    let p = mean_region_probability(samples, region)?;
    let ln2 = std::f64::consts::LN_2;
    let values = p.map(|v| (100.0 * binary_entropy(v) / ln2).clamp(0.0, 100.0));
    Ok(UncertaintyMap { values, region })
}

/// Segmentation quality after discarding voxels more uncertain than `T`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilteredResult {
    pub threshold: f64,
    /// Voxels still classified.
    pub kept: usize,
    pub total: usize,
    pub dice_filtered: f64,
    /// Fraction of ground-truth-positive voxels that were correctly
    /// predicted but filtered out.
    pub ftp_ratio: f64,
    /// Same for ground-truth-negative voxels.
    pub ftn_ratio: f64,
    /// Set when every voxel was filtered; Dice is then 1.0 by convention.
    pub degenerate_all_filtered: bool,
}

/// Apply one uncertainty threshold: voxels with uncertainty above `T` become
/// "uncertain" and leave the evaluation; Dice is computed on the rest.
pub fn filter_at_threshold(
    pred_mask: &Tensor<bool>,
    unc: &UncertaintyMap,
    gt_mask: &Tensor<bool>,
    threshold: f64,
) -> Result<FilteredResult> {
    if !(0.0..=100.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "threshold {threshold} outside [0, 100]"
        )));
    }
    if pred_mask.shape() != gt_mask.shape() || pred_mask.shape() != unc.values.shape() {
        return Err(Error::Shape(format!(
            "filter: pred {:?} / gt {:?} / uncertainty {:?}",
            pred_mask.shape(),
            gt_mask.shape(),
            unc.values.shape()
        )));
    }
    let total = pred_mask.len();
    let mut kept_count = 0usize;
    let mut gt_pos = 0usize;
    let mut gt_neg = 0usize;
    let mut filtered_tp = 0usize;
    let mut filtered_tn = 0usize;
    let mut kept_pred = Vec::with_capacity(total);
    let mut kept_gt = Vec::with_capacity(total);
    for ((&p, &g), &u) in pred_mask
        .data()
        .iter()
        .zip(gt_mask.data())
        .zip(unc.values.data())
    {
        let kept = u <= threshold;
        if g {
            gt_pos += 1;
        } else {
            gt_neg += 1;
        }
        if kept {
            kept_count += 1;
            kept_pred.push(p);
            kept_gt.push(g);
        } else {
            // Penalize filtering away correct assertions.
            if g && p {
                filtered_tp += 1;
            }
            if !g && !p {
                filtered_tn += 1;
            }
        }
    }
    let degenerate = kept_count == 0;
    let dice_filtered = if degenerate {
        1.0
    } else {
        let kp = Tensor::from_vec(&[kept_pred.len()], kept_pred)?;
        let kg = Tensor::from_vec(&[kept_gt.len()], kept_gt)?;
        dice(&kp, &kg)
    };
    Ok(FilteredResult {
        threshold,
        kept: kept_count,
        total,
        dice_filtered,
        ftp_ratio: if gt_pos == 0 {
            0.0
        } else {
            filtered_tp as f64 / gt_pos as f64
        },
        ftn_ratio: if gt_neg == 0 {
            0.0
        } else {
            filtered_tn as f64 / gt_neg as f64
        },
        degenerate_all_filtered: degenerate,
    })
}

/// Aggregate uncertainty score over the four standard thresholds: the mean
/// filtered Dice rewarded, the mean filtered-TP and filtered-TN ratios
/// penalized, equally weighted, in `[0, 1]`.
pub fn uncertainty_score(results: &BTreeMap<u32, FilteredResult>) -> Result<f64> {
    for t in SCORE_THRESHOLDS {
        if !results.contains_key(&t) {
            return Err(Error::Config(format!(
                "uncertainty score needs threshold {t}"
            )));
        }
    }
    let n = SCORE_THRESHOLDS.len() as f64;
    let mean_dice: f64 = SCORE_THRESHOLDS
        .iter()
        .map(|t| results[t].dice_filtered)
        .sum::<f64>()
        / n;
    let mean_ftp: f64 = SCORE_THRESHOLDS.iter().map(|t| results[t].ftp_ratio).sum::<f64>() / n;
    let mean_ftn: f64 = SCORE_THRESHOLDS.iter().map(|t| results[t].ftn_ratio).sum::<f64>() / n;
    Ok(((mean_dice + (1.0 - mean_ftp) + (1.0 - mean_ftn)) / 3.0).clamp(0.0, 1.0))
}

/// Export form: clamped to `[0,100]` and quantized to u8 (the upload
/// convention for uncertainty maps).
pub fn quantize_uncertainty(unc: &UncertaintyMap) -> Tensor<u8> {
    let data = unc
        .values
        .data()
        .iter()
        .map(|&v| v.round().clamp(0.0, 100.0) as u8)
        .collect();
    Tensor::from_vec(unc.values.shape(), data).expect("same shape")
}
