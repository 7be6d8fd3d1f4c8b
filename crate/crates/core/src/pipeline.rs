//! Command-level operations shared by the CLI and the integration tests:
//! case inference, per-case uncertainty analysis, directory evaluation and
//! report rendering.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::DataSection;
use crate::error::{Error, Result};
use crate::io::cases::{self, Manifest, Split};
use crate::metrics::{compare_reports, evaluate_case, DiceTriple, EvalReport, PValue};
use crate::nets::{probs_to_labels, SegNet};
use crate::scalar::Scalar;
use crate::uncertainty::{
    entropy_uncertainty, filter_at_threshold, mc_sample, quantize_uncertainty, uncertainty_score,
    FilteredResult, UncertaintyMap,
};
use crate::volumes::{
    center_crop, center_crop_seg, region_mask, zscore_normalize, CropMode, MultiModalVolume,
    RegionSpec, SegmentationMap,
};

/// Load and preprocess one case for a given modality list.
pub fn load_preprocessed<T: Scalar>(
    case_dir: &Path,
    modalities: &[String],
    crop_to: Option<&[usize]>,
) -> Result<MultiModalVolume<T>> {
    let mut vol = cases::load_case::<T>(case_dir, modalities)?;
    if let Some(target) = crop_to {
        vol = center_crop(&vol, target, CropMode::PadThenCrop)?;
    }
    let (vol, warnings) = zscore_normalize(&vol)?;
    for w in warnings {
        eprintln!(
            "warning: {}: degenerate channel {} zeroed",
            case_dir.display(),
            w.modality
        );
    }
    Ok(vol)
}

/// Deterministic inference on one case; reads only the listed modalities.
pub fn infer_case<T: Scalar>(
    net: &SegNet<T>,
    case_dir: &Path,
    modalities: &[String],
    crop_to: Option<&[usize]>,
) -> Result<SegmentationMap> {
    let vol = load_preprocessed::<T>(case_dir, modalities, crop_to)?;
    let x = vol.stack(modalities)?;
    let out = net.forward(&x, None)?;
    Ok(probs_to_labels(&out.probs))
}

/// Case ids of a dataset directory: manifest order when present, otherwise
/// sorted subdirectories containing a label file.
pub fn list_case_ids(dataset_dir: &Path, split: Option<Split>) -> Result<Vec<String>> {
    if dataset_dir.join(cases::MANIFEST_FILE).exists() {
        let manifest = Manifest::read(dataset_dir)?;
        return Ok(match split {
            Some(s) => manifest.split_cases(s),
            None => manifest.cases.keys().cloned().collect(),
        });
    }
    if split.is_some() {
        return Err(Error::Data(format!(
            "{}: split filtering requires a manifest",
            dataset_dir.display()
        )));
    }
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dataset_dir)? {
        let entry = entry?;
        if entry.path().is_dir() && entry.path().join(cases::SEG_FILE).exists() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

/// Locate a case's label file under either supported layout.
pub fn find_labels(dir: &Path, case_id: &str) -> Option<PathBuf> {
    let nested = dir.join(case_id).join(cases::SEG_FILE);
    if nested.exists() {
        return Some(nested);
    }
    let flat = dir.join(format!("{case_id}.nii.gz"));
    flat.exists().then_some(flat)
}

/// Evaluate a prediction directory against a ground-truth directory over the
/// case ids present in the ground truth (optionally one split).
pub fn eval_dirs(pred_dir: &Path, gt_dir: &Path, split: Option<Split>) -> Result<EvalReport> {
    let ids = list_case_ids(gt_dir, split)?;
    if ids.is_empty() {
        return Err(Error::Data(format!(
            "{}: no cases found",
            gt_dir.display()
        )));
    }
    let mut per_case = BTreeMap::new();
    for id in ids {
        let gt_path = find_labels(gt_dir, &id)
            .ok_or_else(|| Error::Data(format!("missing ground-truth labels for {id}")))?;
        let pred_path = find_labels(pred_dir, &id)
            .ok_or_else(|| Error::Data(format!("missing prediction for {id}")))?;
        let gt = cases::load_labels(&gt_path)?;
        let mut pred = cases::load_labels(&pred_path)?;
        if pred.dims() != gt.dims() {
            // The prediction may be on the cropped grid.
            pred = center_crop_seg(&pred, gt.dims(), CropMode::PadThenCrop)?;
        }
        per_case.insert(id, evaluate_case(&pred, &gt)?);
    }
    Ok(EvalReport::from_cases(per_case))
}

/// Per-case uncertainty outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseUncertainty {
    pub case_id: String,
    pub region: RegionSpec,
    pub samples: usize,
    /// Present when ground truth was available.
    pub score: Option<f64>,
    pub per_threshold: Vec<FilteredResult>,
    pub unfiltered_dice: Option<f64>,
}

/// MC-dropout uncertainty for one case: sample, build the entropy map, and
/// (when ground truth exists) filter at the standard thresholds and score.
#[allow(clippy::too_many_arguments)]
pub fn uncertainty_case<T: Scalar>(
    net: &SegNet<T>,
    case_dir: &Path,
    case_id: &str,
    data: &DataSection,
    region: RegionSpec,
    samples: usize,
    thresholds: &[u32],
    seed: u64,
) -> Result<(UncertaintyMap, CaseUncertainty)> {
    let vol = load_preprocessed::<T>(case_dir, &data.modalities_pre, data.crop_to.as_deref())?;
    let x = vol.stack(&data.modalities_pre)?;
    let det = net.forward(&x, None)?;
    let pred = probs_to_labels(&det.probs);
    let pred_mask = region_mask(&pred, region);

    let mc = mc_sample(net, &x, samples, seed)?;
    let unc = entropy_uncertainty(&mc, region)?;

    let gt_path = case_dir.join(cases::SEG_FILE);
    let (score, per_threshold, unfiltered) = if gt_path.exists() {
        let mut gt = cases::load_labels(&gt_path)?;
        if gt.dims() != pred.dims() {
            gt = center_crop_seg(&gt, pred.dims(), CropMode::PadThenCrop)?;
        }
        let gt_mask = region_mask(&gt, region);
        let mut results = BTreeMap::new();
        let mut listed = Vec::new();
        for &t in thresholds {
            let r = filter_at_threshold(&pred_mask, &unc, &gt_mask, t as f64)?;
            listed.push(r.clone());
            results.insert(t, r);
        }
        let score = uncertainty_score(&results).ok();
        let unfiltered = crate::metrics::dice(&pred_mask, &gt_mask);
        (score, listed, Some(unfiltered))
    } else {
        (None, Vec::new(), None)
    };

    Ok((
        unc,
        CaseUncertainty {
            case_id: case_id.to_string(),
            region,
            samples,
            score,
            per_threshold,
            unfiltered_dice: unfiltered,
        },
    ))
}

/// Write an uncertainty map in the export convention (u8, 0-100).
pub fn save_uncertainty_map(path: &Path, unc: &UncertaintyMap, spacing: &[f64]) -> Result<()> {
    crate::io::nifti::write_nifti_u8(path, &quantize_uncertainty(unc), spacing)
}

/// Render Dice aggregates as a percent table (methods as columns).
pub fn render_table(reports: &BTreeMap<String, EvalReport>) -> String {
    let mut out = String::new();
    let methods: Vec<&String> = reports.keys().collect();
    out.push_str(&format!("{:<8}", "region"));
    for m in &methods {
        out.push_str(&format!("{:>22}", m));
    }
    out.push('\n');
    for region in ["WT", "TC", "ET"] {
        out.push_str(&format!("{region:<8}"));
        for m in &methods {
            let stat = &reports[*m].aggregate[region];
            out.push_str(&format!(
                "{:>22}",
                format!("{:.1} ± {:.1}", 100.0 * stat.mean, 100.0 * stat.std)
            ));
        }
        out.push('\n');
    }
    out
}

/// Render pairwise paired-t-test p-values per region.
pub fn render_comparisons(
    comparisons: &BTreeMap<String, BTreeMap<String, PValue>>,
) -> String {
    let mut out = String::new();
    out.push_str("paired two-sided t-test p-values\n");
    for (pair, regions) in comparisons {
        for region in ["WT", "TC", "ET"] {
            let p = match regions.get(region) {
                Some(PValue::Value(p)) => format!("{p:.6}"),
                Some(PValue::Degenerate) => "degenerate (zero-variance differences)".into(),
                None => continue,
            };
            out.push_str(&format!("{pair:<28} {region}: {p}\n"));
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalCaseRecord {
    pub case_id: String,
    pub wt: f64,
    pub tc: f64,
    pub et: f64,
}

/// Write an evaluation report as JSON lines (one per case) plus aggregates.
pub fn write_eval_jsonl(path: &Path, method: &str, report: &EvalReport) -> Result<()> {
    use std::io::Write;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (case_id, triple) in &report.per_case {
        let record = serde_json::json!({
            "method": method,
            "case_id": case_id,
            "wt": triple.wt,
            "tc": triple.tc,
            "et": triple.et,
        });
        writeln!(f, "{record}")?;
    }
    let agg = serde_json::json!({
        "method": method,
        "aggregate": report.aggregate,
    });
    writeln!(f, "{agg}")?;
    Ok(())
}

/// Cross-method comparisons for a report bundle: every pair, by name order.
pub fn all_comparisons(
    reports: &BTreeMap<String, EvalReport>,
) -> Result<BTreeMap<String, BTreeMap<String, PValue>>> {
    let names: Vec<&String> = reports.keys().collect();
    let mut out = BTreeMap::new();
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            let key = format!("{} vs {}", names[i], names[j]);
            out.insert(key, compare_reports(&reports[names[i]], &reports[names[j]])?);
        }
    }
    Ok(out)
}

/// Mean Dice triple across a report's cases.
pub fn mean_triple(report: &EvalReport) -> DiceTriple {
    DiceTriple {
        wt: report.aggregate["WT"].mean,
        tc: report.aggregate["TC"].mean,
        et: report.aggregate["ET"].mean,
    }
}
