//! Region Dice evaluation and the two-sided paired t-test.
//!
//! Dice follows the BraTS conventions: empty/empty pairs score 1.0 and
//! empty-vs-nonempty scores 0.0. The t-distribution CDF is computed through
//! the regularized incomplete beta function in `f64`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volumes::{region_mask, RegionSpec, SegmentationMap, ALL_REGIONS};

/// Dice overlap `2|A∩B| / (|A|+|B|)`; both-empty scores 1.0.
pub fn dice(pred: &Tensor<bool>, gt: &Tensor<bool>) -> f64 {
    debug_assert_eq!(pred.shape(), gt.shape());
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        a += p as usize;
        b += g as usize;
        inter += (p && g) as usize;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiceTriple {
    pub wt: f64,
    pub tc: f64,
    pub et: f64,
}

impl DiceTriple {
    pub fn get(&self, region: RegionSpec) -> f64 {
        match region {
            RegionSpec::WT => self.wt,
            RegionSpec::TC => self.tc,
            RegionSpec::ET => self.et,
        }
    }

    pub fn mean(&self) -> f64 {
        (self.wt + self.tc + self.et) / 3.0
    }
}

/// WT/TC/ET Dice between predicted and ground-truth label maps.
pub fn evaluate_case(pred: &SegmentationMap, gt: &SegmentationMap) -> Result<DiceTriple> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "evaluate_case: pred dims {:?} != gt dims {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let score = |r| dice(&region_mask(pred, r), &region_mask(gt, r));
    Ok(DiceTriple {
        wt: score(RegionSpec::WT),
        tc: score(RegionSpec::TC),
        et: score(RegionSpec::ET),
    })
}

/// Outcome of a paired t-test; zero-variance differences are not a number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PValue {
    Value(f64),
    /// All paired differences identical: the t statistic is undefined.
    Degenerate,
}

impl PValue {
    pub fn value(&self) -> Option<f64> {
        match self {
            PValue::Value(p) => Some(*p),
            PValue::Degenerate => None,
        }
    }
}

/// Two-sided paired t-test on per-case score vectors.
pub fn paired_ttest(scores_a: &[f64], scores_b: &[f64]) -> Result<PValue> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::Shape(format!(
            "paired t-test: {} vs {} cases",
            scores_a.len(),
            scores_b.len()
        )));
    }
    let n = scores_a.len();
    if n < 2 {
        return Err(Error::Config("paired t-test needs at least 2 pairs".into()));
    }
    let diffs: Vec<f64> = scores_a.iter().zip(scores_b).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let ss: f64 = diffs.iter().map(|d| (d - mean) * (d - mean)).sum();
    let var = ss / (n as f64 - 1.0);
    if var <= 0.0 {
        return Ok(PValue::Degenerate);
    }
    let t = mean / (var / n as f64).sqrt();
    let dof = (n - 1) as f64;
    Ok(PValue::Value(two_sided_p(t, dof)))
}

/// `P(|T| >= |t|)` for Student's t with `dof` degrees of freedom.
pub fn two_sided_p(t: f64, dof: f64) -> f64 {
    let x = dof / (dof + t * t);
    // Survival mass in both tails equals I_x(dof/2, 1/2).
    regularized_incomplete_beta(0.5 * dof, 0.5, x).clamp(0.0, 1.0)
}

/// CDF of Student's t distribution.
pub fn student_t_cdf(t: f64, dof: f64) -> f64 {
    let p = two_sided_p(t, dof);
    if t >= 0.0 {
        1.0 - 0.5 * p
    } else {
        0.5 * p
    }
}

/// ln Γ(x) via the Lanczos approximation (g = 7, n = 9), |rel err| < 1e-13.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = 0.99999999999980993;
    for (i, c) in COEF.iter().enumerate() {
        acc += c / (x + (i + 1) as f64);
    }
    let t = x + 7.5;
    0.5 * (std::f64::consts::TAU).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta function I_x(a, b) via the Lentz continued
/// fraction; converges to ~1e-15 for the (a, b) ranges used here.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!((0.0..=1.0).contains(&x), "x out of range: {x}");
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // The continued fraction converges fastest for x < (a+1)/(a+b+2).
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Mean and standard deviation (population) of a score vector.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionStat {
    pub mean: f64,
    pub std: f64,
}

/// Per-case Dice scores plus aggregates and method comparisons.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// case id -> Dice triple, ordered by case id.
    pub per_case: BTreeMap<String, DiceTriple>,
    /// region name -> mean/std over cases.
    pub aggregate: BTreeMap<String, RegionStat>,
    /// "methodA vs methodB" -> region name -> p-value.
    pub comparisons: BTreeMap<String, BTreeMap<String, PValue>>,
}

impl EvalReport {
    pub fn from_cases(per_case: BTreeMap<String, DiceTriple>) -> Self {
        let mut aggregate = BTreeMap::new();
        for region in ALL_REGIONS {
            let vals: Vec<f64> = per_case.values().map(|t| t.get(region)).collect();
            let (mean, std) = if vals.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&vals) };
            aggregate.insert(region.name().to_string(), RegionStat { mean, std });
        }
        EvalReport {
            per_case,
            aggregate,
            comparisons: BTreeMap::new(),
        }
    }

    pub fn region_scores(&self, region: RegionSpec) -> Vec<f64> {
        self.per_case.values().map(|t| t.get(region)).collect()
    }
}

/// Compare two reports region-by-region with the paired t-test. Only cases
/// present in both reports are paired; pairing follows case-id order.
pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<BTreeMap<String, PValue>> {
    let shared: Vec<&String> = a.per_case.keys().filter(|k| b.per_case.contains_key(*k)).collect();
    if shared.len() < 2 {
        return Err(Error::Data(format!(
            "paired comparison needs >= 2 shared cases, found {}",
            shared.len()
        )));
    }
    let mut out = BTreeMap::new();
    for region in ALL_REGIONS {
        let va: Vec<f64> = shared.iter().map(|k| a.per_case[*k].get(region)).collect();
        let vb: Vec<f64> = shared.iter().map(|k| b.per_case[*k].get(region)).collect();
        out.insert(region.name().to_string(), paired_ttest(&va, &vb)?);
    }
    Ok(out)
}
