//! Command implementations; all heavy lifting lives in `hadnet_core`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use hadnet_core::config::RunConfig;
use hadnet_core::error::{Error, Result};
use hadnet_core::io::cases::{self, Split};
use hadnet_core::nets::SegNet;
use hadnet_core::pipeline;
use hadnet_core::synthdata::generate_dataset;
use hadnet_core::train::{self, data::TrainData, Role};
use hadnet_core::volumes::RegionSpec;
use hadnet_core::Real;

use crate::{ModeArg, RoleArg};

/// Load the config (or defaults), apply the seed override, validate.
fn resolve_config(config: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.save(&dir.join(train::CONFIG_FILE))
}

pub fn synth(
    config: Option<&Path>,
    out: &Path,
    cases_override: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = resolve_config(config, seed)?;
    if let Some(n) = cases_override {
        cfg.synth.cases = n;
    }
    let mut phantom = cfg.phantom.clone();
    phantom.seed = cfg.seed;
    cfg.phantom = phantom.clone();
    let split = (cfg.synth.split[0], cfg.synth.split[1], cfg.synth.split[2]);
    let manifest = generate_dataset::<Real>(&phantom, cfg.synth.cases, split, out)?;
    write_resolved(&cfg, out)?;
    let (train_n, val_n, test_n) = manifest.counts();
    println!(
        "synth: {} cases ({train_n} train / {val_n} val / {test_n} test) in {}",
        cfg.synth.cases,
        out.display()
    );
    Ok(())
}

pub fn pretrain_cmd(
    role: RoleArg,
    config: Option<&Path>,
    data_dir: &Path,
    out: &Path,
    seed: Option<u64>,
    resume: bool,
) -> Result<()> {
    let cfg = resolve_config(config, seed)?;
    let (role, net_config, modalities) = match role {
        RoleArg::Teacher => (
            Role::Teacher,
            cfg.teacher_network(),
            cfg.data.all_modalities(),
        ),
        RoleArg::Student => (
            Role::Student,
            cfg.student_network(),
            cfg.data.modalities_pre.clone(),
        ),
    };
    // The teacher needs every modality on disk; missing contrast is a data
    // error raised by the loader before any training.
    let data = TrainData::<Real>::load(data_dir, &modalities, cfg.data.crop_to.as_deref())?;
    std::fs::create_dir_all(out)?;
    write_resolved(&cfg, out)?;
    let outcome = train::pretrain(
        net_config,
        &data,
        &modalities,
        &cfg.pretrain,
        cfg.seed,
        role,
        out,
        resume,
    )?;
    println!(
        "pretrain {}: {} epochs, best val mean Dice {:.4} at epoch {}",
        role.name(),
        outcome.epochs_run,
        outcome.best_val_mean_dice.unwrap_or(f64::NAN),
        outcome.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn distill_cmd(
    mode: ModeArg,
    config: Option<&Path>,
    teacher: &Path,
    student: &Path,
    data_dir: &Path,
    out: &Path,
    seed: Option<u64>,
    resume: bool,
) -> Result<()> {
    let mut cfg = resolve_config(config, seed)?;
    cfg.distill.hierarchical = mode == ModeArg::Hadnet;
    let data = TrainData::<Real>::load(
        data_dir,
        &cfg.data.all_modalities(),
        cfg.data.crop_to.as_deref(),
    )?;
    std::fs::create_dir_all(out)?;
    write_resolved(&cfg, out)?;
    let outcome = train::run_distillation(
        teacher,
        student,
        &data,
        &cfg.data.modalities_pre,
        &cfg.data.all_modalities(),
        &cfg.distill,
        cfg.seed,
        out,
        resume,
    )?;
    println!(
        "distill ({}): {} epochs, best val ET Dice {:.4} at epoch {}, teacher digest {:016x}",
        if cfg.distill.hierarchical { "hierarchical" } else { "non-hierarchical" },
        outcome.epochs_run,
        outcome.best_val_et_dice.unwrap_or(f64::NAN),
        outcome.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
        outcome.teacher_digest,
    );
    Ok(())
}

fn load_student(ckpt: &Path) -> Result<SegNet<Real>> {
    let (net, role) = SegNet::<Real>::load(ckpt)?;
    if role != Role::Student.name() {
        return Err(Error::Checkpoint(format!(
            "{} is a {role} checkpoint; inference runs the student",
            ckpt.display()
        )));
    }
    Ok(net)
}

pub fn infer_cmd(
    ckpt: &Path,
    config: Option<&Path>,
    case: Option<&Path>,
    data: Option<&Path>,
    split: &str,
    out: &Path,
) -> Result<()> {
    let cfg = resolve_config(config, None)?;
    let net = load_student(ckpt)?;
    let crop = cfg.data.crop_to.as_deref();
    match (case, data) {
        (Some(case_dir), None) => {
            let seg = pipeline::infer_case(&net, case_dir, &cfg.data.modalities_pre, crop)?;
            let path = if out.extension().is_some() {
                out.to_path_buf()
            } else {
                let id = case_dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "case".into());
                out.join(format!("{id}.nii.gz"))
            };
            cases::save_labels(&path, &seg, &[1.0; 3][..seg.dims().len()])?;
            println!("infer: wrote {}", path.display());
        }
        (None, Some(dataset)) => {
            let split = Split::parse(split)?;
            let ids = pipeline::list_case_ids(dataset, Some(split))?;
            if ids.is_empty() {
                return Err(Error::Data(format!("no cases in split {split:?}")));
            }
            std::fs::create_dir_all(out)?;
            for id in &ids {
                let seg =
                    pipeline::infer_case(&net, &dataset.join(id), &cfg.data.modalities_pre, crop)?;
                let path = out.join(format!("{id}.nii.gz"));
                cases::save_labels(&path, &seg, &[1.0; 3][..seg.dims().len()])?;
            }
            println!("infer: wrote {} predictions to {}", ids.len(), out.display());
        }
        _ => {
            return Err(Error::Config(
                "infer needs exactly one of --case or --data".into(),
            ))
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn uncertainty_cmd(
    ckpt: &Path,
    config: Option<&Path>,
    case: Option<&Path>,
    data: Option<&Path>,
    split: &str,
    out: &Path,
    samples: Option<usize>,
    thresholds: Option<&str>,
    region: Option<&str>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = resolve_config(config, seed)?;
    if let Some(n) = samples {
        cfg.uncertainty.samples = n;
    }
    if let Some(t) = thresholds {
        let parsed: std::result::Result<Vec<u32>, _> =
            t.split(',').map(|v| v.trim().parse()).collect();
        cfg.uncertainty.thresholds =
            parsed.map_err(|e| Error::Config(format!("bad thresholds {t:?}: {e}")))?;
    }
    if let Some(r) = region {
        cfg.uncertainty.region = r.to_string();
    }
    cfg.validate()?;
    let region = RegionSpec::parse(&cfg.uncertainty.region)?;
    let net = load_student(ckpt)?;
    if net.config.dropout_p <= 0.0 {
        return Err(Error::Config(
            "checkpoint was trained without dropout; MC sampling is undefined".into(),
        ));
    }

    let case_list: Vec<(String, std::path::PathBuf)> = match (case, data) {
        (Some(dir), None) => {
            let id = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "case".into());
            vec![(id, dir.to_path_buf())]
        }
        (None, Some(dataset)) => {
            let split = Split::parse(split)?;
            pipeline::list_case_ids(dataset, Some(split))?
                .into_iter()
                .map(|id| (id.clone(), dataset.join(id)))
                .collect()
        }
        _ => {
            return Err(Error::Config(
                "uncertainty needs exactly one of --case or --data".into(),
            ))
        }
    };
    if case_list.is_empty() {
        return Err(Error::Data("no cases to analyze".into()));
    }

    std::fs::create_dir_all(out)?;
    write_resolved(&cfg, out)?;
    let report_path = out.join("uncertainty.jsonl");
    let mut report = std::io::BufWriter::new(std::fs::File::create(&report_path)?);
    let mut scores = Vec::new();
    for (id, dir) in &case_list {
        let (unc, case_report) = pipeline::uncertainty_case(
            &net,
            dir,
            id,
            &cfg.data,
            region,
            cfg.uncertainty.samples,
            &cfg.uncertainty.thresholds,
            cfg.seed,
        )?;
        let rank = unc.values.rank();
        pipeline::save_uncertainty_map(
            &out.join(format!("{id}_unc.nii.gz")),
            &unc,
            &[1.0; 3][..rank],
        )?;
        writeln!(report, "{}", serde_json::to_string(&case_report)?)?;
        if let Some(s) = case_report.score {
            scores.push(s);
        }
        match case_report.score {
            Some(s) => println!("uncertainty {id}: score {s:.4} ({} samples)", case_report.samples),
            None => println!("uncertainty {id}: map written (no ground truth for scoring)"),
        }
    }
    if !scores.is_empty() {
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        writeln!(
            report,
            "{}",
            serde_json::json!({"aggregate_score": mean, "cases": scores.len()})
        )?;
        println!("uncertainty: mean score {mean:.4} over {} cases", scores.len());
    }
    Ok(())
}

pub fn eval_cmd(pred: &Path, gt: &Path, split: Option<&str>, out: &Path) -> Result<()> {
    let split = split.map(Split::parse).transpose()?;
    let report = pipeline::eval_dirs(pred, gt, split)?;
    std::fs::create_dir_all(out)?;
    pipeline::write_eval_jsonl(&out.join("eval.jsonl"), "pred", &report)?;
    let mut table_reports = BTreeMap::new();
    table_reports.insert("pred".to_string(), report);
    let table = pipeline::render_table(&table_reports);
    std::fs::write(out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn report_cmd(
    gt: &Path,
    preds: &[String],
    split: Option<&str>,
    out: &Path,
    overlay_cases: Option<&str>,
    overlay_modality: &str,
) -> Result<()> {
    let split = split.map(Split::parse).transpose()?;
    let mut labeled = Vec::new();
    for spec in preds {
        let (name, dir) = spec.split_once('=').ok_or_else(|| {
            Error::Config(format!("--pred wants NAME=DIR, got {spec:?}"))
        })?;
        labeled.push((name.to_string(), std::path::PathBuf::from(dir)));
    }
    let mut reports = BTreeMap::new();
    for (name, dir) in &labeled {
        reports.insert(name.clone(), pipeline::eval_dirs(dir, gt, split)?);
    }
    let comparisons = if reports.len() >= 2 {
        pipeline::all_comparisons(&reports)?
    } else {
        BTreeMap::new()
    };

    std::fs::create_dir_all(out)?;
    for (name, report) in &reports {
        pipeline::write_eval_jsonl(&out.join(format!("eval_{name}.jsonl")), name, report)?;
    }
    let mut text = pipeline::render_table(&reports);
    if !comparisons.is_empty() {
        text.push('\n');
        text.push_str(&pipeline::render_comparisons(&comparisons));
    }
    std::fs::write(out.join("table.txt"), &text)?;
    let comparisons_json = serde_json::to_string_pretty(&comparisons)?;
    std::fs::write(out.join("comparisons.json"), comparisons_json + "\n")?;
    print!("{text}");

    if let Some(ids) = overlay_cases {
        for id in ids.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let bg_path = gt.join(id).join(format!("{overlay_modality}.nii.gz"));
            let background = hadnet_core::io::nifti::read_nifti(&bg_path)?.to_tensor::<Real>();
            let middle = background.shape()[0] / 2;
            // Ground truth overlay plus one per method.
            if let Some(gt_labels) = pipeline::find_labels(gt, id) {
                let seg = cases::load_labels(&gt_labels)?;
                hadnet_core::io::overlay::write_overlay_png(
                    &out.join("overlays").join(format!("{id}_gt.png")),
                    &background,
                    &seg,
                    middle,
                )?;
            }
            for (name, dir) in &labeled {
                let Some(pred_path) = pipeline::find_labels(dir, id) else {
                    continue;
                };
                let seg = cases::load_labels(&pred_path)?;
                hadnet_core::io::overlay::write_overlay_png(
                    &out.join("overlays").join(format!("{id}_{name}.png")),
                    &background,
                    &seg,
                    middle,
                )?;
            }
        }
    }
    Ok(())
}
