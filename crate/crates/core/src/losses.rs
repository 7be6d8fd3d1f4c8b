//! Training objectives: weighted cross-entropy with per-epoch decay, the
//! student loss (CE plus a lambda-weighted least-squares adversarial term),
//! the discriminator's two-sided MSE loss, and discriminator accuracy.
//!
//! All reductions are means over voxels/patches, so values are invariant to
//! volume and score-map size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::PatchScoreMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volumes::SegmentationMap;

/// Log clamp keeping saturated probabilities finite.
pub const CE_LOG_CLAMP: f64 = 1e-12;

/// Per-class CE weights with the geometric excess-decay schedule: the excess
/// over 1 shrinks by `gamma` each epoch, so weights converge to the
/// unweighted form instead of to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w: Vec<f64>,
    pub gamma: f64,
}

pub const WEIGHT_DECAY_GAMMA: f64 = 0.98;

impl ClassWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|&v| v < 1.0) {
            return Err(Error::Config(format!(
                "class weights must be >= 1 element-wise, got {w:?}"
            )));
        }
        Ok(ClassWeights {
            w,
            gamma: WEIGHT_DECAY_GAMMA,
        })
    }

    pub fn unit(num_classes: usize) -> Self {
        ClassWeights {
            w: vec![1.0; num_classes],
            gamma: WEIGHT_DECAY_GAMMA,
        }
    }

    /// Inverse-frequency weights from label counts, normalized so a balanced
    /// dataset gets all-ones, clipped to `[1, 10]`.
    pub fn inverse_frequency(counts: &[usize]) -> Self {
        let total: usize = counts.iter().sum();
        let c = counts.len() as f64;
        let mean = total as f64 / c;
        let w = counts
            .iter()
            .map(|&n| {
                if n == 0 {
                    10.0
                } else {
                    (mean / n as f64).clamp(1.0, 10.0)
                }
            })
            .collect();
        ClassWeights {
            w,
            gamma: WEIGHT_DECAY_GAMMA,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w.len()
    }
}

/// Weights after `epoch` decay steps: `w_e = 1 + (w_0 - 1) * gamma^epoch`.
pub fn decay_weights(weights: &ClassWeights, epoch: usize) -> ClassWeights {
    let factor = weights.gamma.powi(epoch as i32);
    ClassWeights {
        w: weights.w.iter().map(|&w0| 1.0 + (w0 - 1.0) * factor).collect(),
        gamma: weights.gamma,
    }
}

/// Mean over voxels of `-w[y] * log(p[y])`, log clamped at 1e-12.
pub fn weighted_ce<T: Scalar>(
    probs: &Tensor<T>,
    target: &SegmentationMap,
    weights: &ClassWeights,
) -> Result<T> {
    let (loss, _) = weighted_ce_with_grad(probs, target, weights, false)?;
    Ok(loss)
}

/// Weighted CE and (optionally) its gradient with respect to `probs`.
pub fn weighted_ce_with_grad<T: Scalar>(
    probs: &Tensor<T>,
    target: &SegmentationMap,
    weights: &ClassWeights,
    want_grad: bool,
) -> Result<(T, Option<Tensor<T>>)> {
    let num_classes = probs.shape()[0];
    if &probs.shape()[1..] != target.dims() {
        return Err(Error::Shape(format!(
            "probs spatial {:?} != target {:?}",
            &probs.shape()[1..],
            target.dims()
        )));
    }
    if weights.num_classes() != num_classes {
        return Err(Error::Shape(format!(
            "{} weights for {num_classes} classes",
            weights.num_classes()
        )));
    }
    let spatial: usize = target.dims().iter().product();
    let clamp = T::from_f64(CE_LOG_CLAMP);
    let n = T::from_f64(spatial as f64);
    let pd = probs.data();
    let mut loss = T::zero();
    let mut grad = want_grad.then(|| Tensor::zeros(probs.shape()));
    for (i, &label) in target.labels().data().iter().enumerate() {
        let idx = label as usize * spatial + i;
        let p = pd[idx];
        let w = T::from_f64(weights.w[label as usize]);
        let clamped = if p > clamp { p } else { clamp };
        loss = loss - w * clamped.ln();
        if let Some(g) = grad.as_mut() {
            // d/dp of -w*ln(max(p, clamp)) is -w/p above the clamp, 0 below.
            if p > clamp {
                g.data_mut()[idx] = -w / (p * n);
            }
        }
    }
    Ok((loss / n, grad))
}

/// The CE and adversarial pieces of the student objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub adv: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Student loss: `CE + lambda * MSE(scores, 1)`; the adversarial term pushes
/// the discriminator's verdict on student samples toward "real".
pub fn student_loss<T: Scalar>(
    probs: &Tensor<T>,
    target: &SegmentationMap,
    hd_scores_on_student: &PatchScoreMap<T>,
    lambda: f64,
    weights: &ClassWeights,
) -> Result<LossBreakdown> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda {lambda} must be >= 0")));
    }
    let ce = weighted_ce(probs, target, weights)?.to_f64_lossy();
    let adv = mse_to_constant(&hd_scores_on_student.scores, 1.0);
    Ok(LossBreakdown {
        ce,
        adv,
        total: ce + lambda * adv,
        lambda,
    })
}

/// Mean squared deviation of a score map from a constant target.
pub fn mse_to_constant<T: Scalar>(scores: &Tensor<T>, target: f64) -> f64 {
    let t = target;
    let n = scores.len() as f64;
    scores
        .data()
        .iter()
        .map(|&s| {
            let d = s.to_f64_lossy() - t;
            d * d
        })
        .sum::<f64>()
        / n
}

/// Gradient of `mse_to_constant` with respect to the scores.
pub fn mse_to_constant_grad<T: Scalar>(scores: &Tensor<T>, target: f64) -> Tensor<T> {
    let n = scores.len() as f64;
    let data = scores
        .data()
        .iter()
        .map(|&s| T::from_f64(2.0 * (s.to_f64_lossy() - target) / n))
        .collect();
    Tensor::from_vec(scores.shape(), data).expect("same shape")
}

/// Discriminator loss: `MSE(fake, 0) + MSE(real, 1)`.
pub fn hd_loss<T: Scalar>(
    scores_fake: &PatchScoreMap<T>,
    scores_real: &PatchScoreMap<T>,
) -> Result<f64> {
    if scores_fake.dims() != scores_real.dims() {
        return Err(Error::Shape(format!(
            "score maps {:?} vs {:?}",
            scores_fake.dims(),
            scores_real.dims()
        )));
    }
    Ok(mse_to_constant(&scores_fake.scores, 0.0) + mse_to_constant(&scores_real.scores, 1.0))
}

/// Fraction of patch scores classified correctly under the midpoint rule
/// (`< 0.5` reads fake, `>= 0.5` reads real), over both maps.
pub fn hd_accuracy<T: Scalar>(
    scores_fake: &PatchScoreMap<T>,
    scores_real: &PatchScoreMap<T>,
) -> f64 {
    let half = 0.5;
    let correct_fake = scores_fake
        .scores
        .data()
        .iter()
        .filter(|s| s.to_f64_lossy() < half)
        .count();
    let correct_real = scores_real
        .scores
        .data()
        .iter()
        .filter(|s| s.to_f64_lossy() >= half)
        .count();
    let total = scores_fake.scores.len() + scores_real.scores.len();
    (correct_fake + correct_real) as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(labels: Vec<u8>) -> SegmentationMap {
        let n = labels.len();
        SegmentationMap::new(Tensor::from_vec(&[n], labels).unwrap()).unwrap()
    }

    fn scoremap(values: Vec<f64>) -> PatchScoreMap<f64> {
        let n = values.len();
        PatchScoreMap {
            scores: Tensor::from_vec(&[n], values).unwrap(),
        }
    }

    #[test]
    fn uniform_probs_unit_weights_is_ln4() {
        let probs = Tensor::filled(&[4, 8], 0.25f64);
        let target = seg(vec![0, 1, 2, 3, 0, 1, 2, 3]);
        let ce = weighted_ce(&probs, &target, &ClassWeights::unit(4)).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12, "{ce}");
    }

    #[test]
    fn perfect_onehot_probs_near_zero() {
        let mut probs = Tensor::zeros(&[4, 4]);
        let labels = vec![0u8, 1, 2, 3];
        for (i, &l) in labels.iter().enumerate() {
            probs.data_mut()[l as usize * 4 + i] = 1.0f64;
        }
        let ce = weighted_ce(&probs, &seg(labels), &ClassWeights::unit(4)).unwrap();
        assert!(ce.abs() < 1e-12);
    }

    #[test]
    fn two_voxel_weighted_hand_case() {
        // probs (0.5, 0.25) on true classes, weights (2,1):
        // (2*ln2 + 1*ln4)/2 = ln4 = 1.3863
        let mut probs = Tensor::filled(&[2, 2], 0.0f64);
        probs.data_mut()[0] = 0.5; // class 0, voxel 0
        probs.data_mut()[1] = 0.75;
        probs.data_mut()[2] = 0.5; // class 1, voxel 0 (unused)
        probs.data_mut()[3] = 0.25; // class 1, voxel 1
        let target = seg(vec![0, 1]);
        let w = ClassWeights::new(vec![2.0, 1.0]).unwrap();
        let ce = weighted_ce(&probs, &target, &w).unwrap();
        let expect = (2.0 * 2f64.ln() + 4f64.ln()) / 2.0;
        assert!((ce - expect).abs() < 1e-12, "{ce} vs {expect}");
        assert!((expect - 1.3862943611).abs() < 1e-9);
    }

    #[test]
    fn decay_examples_and_limit() {
        let w = ClassWeights::new(vec![5.0]).unwrap();
        assert_eq!(decay_weights(&w, 0).w, vec![5.0]);
        let d1 = decay_weights(&w, 1);
        assert!((d1.w[0] - 4.92).abs() < 1e-9);

        let unit = ClassWeights::unit(3);
        for epoch in [0, 1, 10, 500] {
            assert!(decay_weights(&unit, epoch).w.iter().all(|&v| v == 1.0));
        }

        // Monotone and converging to 1. With w0 = 10 the excess is
        // 9 * 0.98^e: ~2.8e-3 at epoch 400, under 1e-3 from epoch 451 on.
        let w = ClassWeights::new(vec![10.0]).unwrap();
        let mut prev = f64::INFINITY;
        for epoch in 0..=500 {
            let cur = decay_weights(&w, epoch).w[0];
            assert!(cur <= prev + 1e-12);
            prev = cur;
        }
        assert!((decay_weights(&w, 451).w[0] - 1.0).abs() < 1e-3);
        assert!((decay_weights(&w, 400).w[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn student_loss_cases() {
        let probs = Tensor::filled(&[4, 4], 0.25f64);
        let target = seg(vec![0, 1, 2, 3]);
        let w = ClassWeights::unit(4);

        let ones = scoremap(vec![1.0; 8]);
        let b = student_loss(&probs, &target, &ones, 0.2, &w).unwrap();
        assert_eq!(b.adv, 0.0);
        assert!((b.total - b.ce).abs() < 1e-15);

        let zeros = scoremap(vec![0.0; 8]);
        let b = student_loss(&probs, &target, &zeros, 0.2, &w).unwrap();
        assert!((b.adv - 1.0).abs() < 1e-15);
        assert!((b.total - (b.ce + 0.2)).abs() < 1e-12);

        let b = student_loss(&probs, &target, &zeros, 0.0, &w).unwrap();
        assert_eq!(b.total, b.ce);
    }

    #[test]
    fn hd_loss_cases() {
        let perfect = hd_loss(&scoremap(vec![0.0; 4]), &scoremap(vec![1.0; 4])).unwrap();
        assert_eq!(perfect, 0.0);

        let mid = hd_loss(&scoremap(vec![0.5; 4]), &scoremap(vec![0.5; 4])).unwrap();
        assert!((mid - 0.5).abs() < 1e-15);

        let fooled = hd_loss(&scoremap(vec![1.0; 4]), &scoremap(vec![0.0; 4])).unwrap();
        assert!((fooled - 2.0).abs() < 1e-15);

        assert!(hd_loss(&scoremap(vec![0.0; 4]), &scoremap(vec![0.0; 2])).is_err());
    }

    #[test]
    fn hd_loss_permutation_invariant() {
        let fake = vec![0.3, -0.2, 0.9, 0.75];
        let real = vec![0.1, 1.4, 0.8, 0.55];
        let l1 = hd_loss(&scoremap(fake.clone()), &scoremap(real.clone())).unwrap();
        let perm = [2usize, 0, 3, 1];
        let fp: Vec<f64> = perm.iter().map(|&i| fake[i]).collect();
        let rp: Vec<f64> = perm.iter().map(|&i| real[i]).collect();
        let l2 = hd_loss(&scoremap(fp), &scoremap(rp)).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
    }

    #[test]
    fn hd_accuracy_cases() {
        assert_eq!(
            hd_accuracy(&scoremap(vec![0.0; 4]), &scoremap(vec![1.0; 4])),
            1.0
        );
        // All scores 0.5: fake half all wrong, real half all right.
        assert_eq!(
            hd_accuracy(&scoremap(vec![0.5; 4]), &scoremap(vec![0.5; 4])),
            0.5
        );
        // Both halves misclassified.
        assert_eq!(
            hd_accuracy(&scoremap(vec![0.6; 4]), &scoremap(vec![0.4; 4])),
            0.0
        );
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut probs = Tensor::filled(&[4, 2], 0.0f64);
        // Valid per-voxel distributions.
        let cols = [[0.4, 0.3, 0.2, 0.1], [0.25, 0.25, 0.3, 0.2]];
        for (i, col) in cols.iter().enumerate() {
            for (c, &v) in col.iter().enumerate() {
                probs.data_mut()[c * 2 + i] = v;
            }
        }
        let target = seg(vec![1, 3]);
        let w = ClassWeights::new(vec![1.5, 2.0, 1.0, 3.0]).unwrap();
        let (_, grad) = weighted_ce_with_grad(&probs, &target, &w, true).unwrap();
        let grad = grad.unwrap();
        let step = 1e-7;
        for i in 0..probs.len() {
            let mut pp = probs.clone();
            pp.data_mut()[i] += step;
            let mut pm = probs.clone();
            pm.data_mut()[i] -= step;
            let lp = weighted_ce(&pp, &target, &w).unwrap();
            let lm = weighted_ce(&pm, &target, &w).unwrap();
            let num = (lp - lm) / (2.0 * step);
            let ana = grad.data()[i];
            let denom = num.abs().max(ana.abs()).max(1e-8);
            assert!(
                ((num - ana) / denom).abs() < 1e-4,
                "index {i}: numeric {num} analytic {ana}"
            );
        }
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let scores = Tensor::from_vec(&[5], vec![0.2f64, -0.4, 1.3, 0.8, 0.0]).unwrap();
        let grad = mse_to_constant_grad(&scores, 1.0);
        let step = 1e-7;
        for i in 0..scores.len() {
            let mut sp = scores.clone();
            sp.data_mut()[i] += step;
            let mut sm = scores.clone();
            sm.data_mut()[i] -= step;
            let num = (mse_to_constant(&sp, 1.0) - mse_to_constant(&sm, 1.0)) / (2.0 * step);
            let ana = grad.data()[i];
            assert!((num - ana).abs() < 1e-6, "index {i}: {num} vs {ana}");
        }
    }

    #[test]
    fn inverse_frequency_clipped() {
        let w = ClassWeights::inverse_frequency(&[970, 10, 10, 10]);
        assert_eq!(w.w[0], 1.0); // majority class clipped up to 1
        assert_eq!(w.w[1], 10.0); // rare class clipped at 10
        let balanced = ClassWeights::inverse_frequency(&[25, 25, 25, 25]);
        assert!(balanced.w.iter().all(|&v| v == 1.0));
        let zero = ClassWeights::inverse_frequency(&[10, 0]);
        assert_eq!(zero.w[1], 10.0);
    }
}
