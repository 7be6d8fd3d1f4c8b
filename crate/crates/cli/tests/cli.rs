//! End-to-end CLI contracts, driven through the built binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_hadnet")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const DESK_CONFIG: &str = r#"
seed = 7

[phantom]
dims = [32, 32]
num_modalities_pre = 3
noise_std = 0.15
lesion_count_range = [1, 2]
nesting_radii = [9.0, 6.0, 3.5]
contrast_gap = 1.0
radius_scale_range = [0.8, 1.2]

[synth]
cases = 10
split = [0.6, 0.2, 0.2]

[network]
k = 4
scales = 2
dropout_p = 0.2
spatial_rank = 2

[pretrain]
epochs = 8
lr = 1e-3
augment = false

[distill]
epochs = 5
lr = 1e-3
ce_weight_epoch_offset = 8

[uncertainty]
samples = 24
"#;

/// Shared fixture: dataset plus pretrained teacher/student and one
/// distilled run, built once for the whole test binary.
struct Fixture {
    root: PathBuf,
}

impl Fixture {
    fn config(&self) -> String {
        self.root.join("desk.toml").to_string_lossy().into_owned()
    }

    fn data(&self) -> String {
        self.root.join("data").to_string_lossy().into_owned()
    }

    fn path(&self, rel: &str) -> String {
        self.root.join(rel).to_string_lossy().into_owned()
    }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        std::fs::write(dir.join("desk.toml"), DESK_CONFIG).unwrap();
        let f = Fixture { root: dir };
        run_ok(&["synth", "--config", &f.config(), "--out", &f.data()]);
        run_ok(&[
            "pretrain",
            "--role",
            "teacher",
            "--config",
            &f.config(),
            "--data",
            &f.data(),
            "--out",
            &f.path("runs/teacher"),
        ]);
        run_ok(&[
            "pretrain",
            "--role",
            "student",
            "--config",
            &f.config(),
            "--data",
            &f.data(),
            "--out",
            &f.path("runs/student"),
        ]);
        run_ok(&[
            "distill",
            "--mode",
            "hadnet",
            "--config",
            &f.config(),
            "--teacher",
            &f.path("runs/teacher/ckpt_best"),
            "--student",
            &f.path("runs/student/ckpt_best"),
            "--data",
            &f.data(),
            "--out",
            &f.path("runs/had"),
        ]);
        f
    })
}

fn dir_digest(dir: &Path) -> u64 {
    // Order-stable digest over relative paths and file contents.
    let mut entries = Vec::new();
    fn walk(dir: &Path, base: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        paths.sort();
        for p in paths {
            if p.is_dir() {
                walk(&p, base, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    walk(dir, dir, &mut entries);
    let mut bytes = Vec::new();
    for (name, content) in entries {
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&content);
    }
    hadnet_core::io::checkpoint::fnv1a64(&bytes)
}

#[test]
fn synth_is_deterministic_and_split_matches() {
    let f = fixture();
    let again = f.path("data_again");
    run_ok(&["synth", "--config", &f.config(), "--out", &again]);
    assert_eq!(
        dir_digest(Path::new(&f.data())),
        dir_digest(Path::new(&again)),
        "same config + seed must produce identical dataset bytes"
    );
    let manifest =
        hadnet_core::io::cases::Manifest::read(Path::new(&f.data())).unwrap();
    assert_eq!(manifest.counts(), (6, 2, 2));
}

#[test]
fn synth_rejects_empty_split_with_config_exit_code() {
    let f = fixture();
    let out = run(&[
        "synth",
        "--config",
        &f.config(),
        "--out",
        &f.path("data_bad"),
        "--cases",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(2), "config error category");
}

#[test]
fn pretrain_log_has_epoch_records_and_best_matches_log() {
    let f = fixture();
    let log = std::fs::read_to_string(f.path("runs/student/log.jsonl")).unwrap();
    let records: Vec<serde_json::Value> =
        log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 8, "one record per epoch");
    // The recorded best equals the max over the log.
    let max_val = records
        .iter()
        .map(|r| r["val_mean"].as_f64().unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    let best_flagged = records
        .iter()
        .filter(|r| r["improved"].as_bool().unwrap())
        .map(|r| r["val_mean"].as_f64().unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(max_val, best_flagged);
    // Resolved config was written with defaults materialized.
    let resolved = std::fs::read_to_string(f.path("runs/student/config.toml")).unwrap();
    assert!(resolved.contains("plateau_patience"));
    assert!(resolved.contains("lambda"));
}

#[test]
fn distill_adnet_records_mode_and_preserves_teacher() {
    let f = fixture();
    let teacher_ckpt = f.path("runs/teacher/ckpt_best");
    let before = hadnet_core::io::checkpoint::file_digest(Path::new(&teacher_ckpt)).unwrap();
    run_ok(&[
        "distill",
        "--mode",
        "adnet",
        "--config",
        &f.config(),
        "--teacher",
        &teacher_ckpt,
        "--student",
        &f.path("runs/student/ckpt_best"),
        "--data",
        &f.data(),
        "--out",
        &f.path("runs/ad"),
    ]);
    let after = hadnet_core::io::checkpoint::file_digest(Path::new(&teacher_ckpt)).unwrap();
    assert_eq!(before, after, "teacher checkpoint bytes must not change");
    let resolved = std::fs::read_to_string(f.path("runs/ad/config.toml")).unwrap();
    assert!(
        resolved.contains("hierarchical = false"),
        "resolved config records the non-hierarchical discriminator"
    );
    let had_resolved = std::fs::read_to_string(f.path("runs/had/config.toml")).unwrap();
    assert!(had_resolved.contains("hierarchical = true"));
}

#[test]
fn distill_resume_continues_to_full_log() {
    let f = fixture();
    // Fresh 2-epoch run, then resume to the configured 5.
    let dir = f.path("runs/resume");
    let short_cfg = f.path("short.toml");
    std::fs::write(
        &short_cfg,
        DESK_CONFIG.replace("epochs = 5", "epochs = 2"),
    )
    .unwrap();
    run_ok(&[
        "distill",
        "--mode",
        "hadnet",
        "--config",
        &short_cfg,
        "--teacher",
        &f.path("runs/teacher/ckpt_best"),
        "--student",
        &f.path("runs/student/ckpt_best"),
        "--data",
        &f.data(),
        "--out",
        &dir,
    ]);
    run_ok(&[
        "distill",
        "--mode",
        "hadnet",
        "--config",
        &f.config(),
        "--teacher",
        &f.path("runs/teacher/ckpt_best"),
        "--student",
        &f.path("runs/student/ckpt_best"),
        "--data",
        &f.data(),
        "--out",
        &dir,
        "--resume",
    ]);
    let resumed = std::fs::read_to_string(Path::new(&dir).join("log.jsonl")).unwrap();
    let reference = std::fs::read_to_string(f.path("runs/had/log.jsonl")).unwrap();
    assert_eq!(resumed, reference, "resumed log must equal the one-shot log bitwise");
}

#[test]
fn infer_never_reads_contrast_and_exports_brats_labels() {
    let f = fixture();
    // Copy one case and replace its contrast file with garbage: inference
    // must neither read it nor change its output.
    let case_src = Path::new(&f.data()).join("case_0008");
    let out_a = f.path("pred_a.nii.gz");
    run_ok(&[
        "infer",
        "--ckpt",
        &f.path("runs/had/ckpt_best"),
        "--config",
        &f.config(),
        "--case",
        &case_src.to_string_lossy(),
        "--out",
        &out_a,
    ]);
    let case_copy = Path::new(&f.root).join("case_garbled");
    std::fs::create_dir_all(&case_copy).unwrap();
    for entry in std::fs::read_dir(&case_src).unwrap() {
        let p = entry.unwrap().path();
        std::fs::copy(&p, case_copy.join(p.file_name().unwrap())).unwrap();
    }
    std::fs::write(case_copy.join("t1ce.nii.gz"), b"not a nifti at all").unwrap();
    let out_b = f.path("pred_b.nii.gz");
    run_ok(&[
        "infer",
        "--ckpt",
        &f.path("runs/had/ckpt_best"),
        "--config",
        &f.config(),
        "--case",
        &case_copy.to_string_lossy(),
        "--out",
        &out_b,
    ]);
    assert_eq!(
        std::fs::read(&out_a).unwrap(),
        std::fs::read(&out_b).unwrap(),
        "prediction must not depend on the contrast file"
    );

    // Exported labels use the BraTS palette {0,1,2,4}.
    let vol = hadnet_core::io::nifti::read_nifti(Path::new(&out_a)).unwrap();
    let labels = vol.to_labels().unwrap();
    assert!(labels.data().iter().all(|l| [0u8, 1, 2, 4].contains(l)));

    // Re-running produces the identical file.
    let out_c = f.path("pred_c.nii.gz");
    run_ok(&[
        "infer",
        "--ckpt",
        &f.path("runs/had/ckpt_best"),
        "--config",
        &f.config(),
        "--case",
        &case_src.to_string_lossy(),
        "--out",
        &out_c,
    ]);
    assert_eq!(std::fs::read(&out_a).unwrap(), std::fs::read(&out_c).unwrap());
}

#[test]
fn uncertainty_outputs_bounded_map_and_consistent_score() {
    let f = fixture();
    let out_dir = f.path("unc");
    run_ok(&[
        "uncertainty",
        "--ckpt",
        &f.path("runs/had/ckpt_best"),
        "--config",
        &f.config(),
        "--case",
        &Path::new(&f.data()).join("case_0008").to_string_lossy(),
        "--out",
        &out_dir,
    ]);
    let map = hadnet_core::io::nifti::read_nifti(
        &Path::new(&out_dir).join("case_0008_unc.nii.gz"),
    )
    .unwrap()
    .to_labels()
    .unwrap();
    assert!(map.data().iter().all(|&v| v <= 100), "values in [0, 100]");

    let report = std::fs::read_to_string(Path::new(&out_dir).join("uncertainty.jsonl")).unwrap();
    let case: serde_json::Value = serde_json::from_str(report.lines().next().unwrap()).unwrap();
    // Score recomputation from the per-threshold entries.
    let per: &Vec<serde_json::Value> = case["per_threshold"].as_array().unwrap().as_ref();
    assert_eq!(per.len(), 4, "default thresholds are 100, 75, 50, 25");
    let thresholds: Vec<f64> = per.iter().map(|r| r["threshold"].as_f64().unwrap()).collect();
    assert_eq!(thresholds, vec![100.0, 75.0, 50.0, 25.0]);
    let mean = |key: &str| -> f64 {
        per.iter().map(|r| r[key].as_f64().unwrap()).sum::<f64>() / per.len() as f64
    };
    let recomputed =
        (mean("dice_filtered") + (1.0 - mean("ftp_ratio")) + (1.0 - mean("ftn_ratio"))) / 3.0;
    let reported = case["score"].as_f64().unwrap();
    assert!((recomputed - reported).abs() < 1e-9);
}

#[test]
fn eval_of_ground_truth_is_perfect_and_report_has_pvalues() {
    let f = fixture();
    // pred == gt: every Dice is 1.0.
    let eval_dir = f.path("eval_self");
    run_ok(&[
        "eval",
        "--pred",
        &f.data(),
        "--gt",
        &f.data(),
        "--split",
        "test",
        "--out",
        &eval_dir,
    ]);
    let text = std::fs::read_to_string(Path::new(&eval_dir).join("eval.jsonl")).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v.get("case_id").is_some() {
            assert_eq!(v["wt"].as_f64().unwrap(), 1.0);
            assert_eq!(v["tc"].as_f64().unwrap(), 1.0);
            assert_eq!(v["et"].as_f64().unwrap(), 1.0);
        }
    }

    // Predictions for two methods plus a comparison report.
    for (name, ckpt) in [("had", "runs/had/ckpt_best"), ("student", "runs/student/ckpt_best")] {
        run_ok(&[
            "infer",
            "--ckpt",
            &f.path(ckpt),
            "--config",
            &f.config(),
            "--data",
            &f.data(),
            "--split",
            "test",
            "--out",
            &f.path(&format!("preds/{name}")),
        ]);
    }
    let report_dir = f.path("report");
    let stdout = run_ok(&[
        "report",
        "--gt",
        &f.data(),
        "--split",
        "test",
        "--pred",
        &format!("had={}", f.path("preds/had")),
        "--pred",
        &format!("student={}", f.path("preds/student")),
        "--out",
        &report_dir,
        "--overlay-cases",
        "case_0008",
    ]);
    assert!(stdout.contains("±"), "table shows mean ± std");
    for region in ["WT", "TC", "ET"] {
        assert!(stdout.contains(region));
    }
    assert!(stdout.contains("p-values"));
    assert!(Path::new(&report_dir).join("comparisons.json").exists());
    assert!(Path::new(&report_dir)
        .join("overlays/case_0008_gt.png")
        .exists());
    assert!(Path::new(&report_dir)
        .join("overlays/case_0008_had.png")
        .exists());

    // The p-value block is recomputable from the per-case JSON lines.
    let had_lines = std::fs::read_to_string(Path::new(&report_dir).join("eval_had.jsonl")).unwrap();
    let st_lines =
        std::fs::read_to_string(Path::new(&report_dir).join("eval_student.jsonl")).unwrap();
    let collect = |text: &str| -> Vec<(String, f64)> {
        text.lines()
            .filter_map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.get("case_id").map(|id| {
                    (id.as_str().unwrap().to_string(), v["et"].as_f64().unwrap())
                })
            })
            .collect()
    };
    let had: Vec<(String, f64)> = collect(&had_lines);
    let st: Vec<(String, f64)> = collect(&st_lines);
    assert_eq!(
        had.iter().map(|(id, _)| id).collect::<Vec<_>>(),
        st.iter().map(|(id, _)| id).collect::<Vec<_>>()
    );
    let a: Vec<f64> = had.iter().map(|(_, v)| *v).collect();
    let b: Vec<f64> = st.iter().map(|(_, v)| *v).collect();
    let p = hadnet_core::metrics::paired_ttest(&a, &b).unwrap();
    let comparisons: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(Path::new(&report_dir).join("comparisons.json")).unwrap(),
    )
    .unwrap();
    let recorded = &comparisons["had vs student"]["ET"];
    match p {
        hadnet_core::metrics::PValue::Value(p) => {
            assert!((recorded["Value"].as_f64().unwrap() - p).abs() < 1e-12);
        }
        hadnet_core::metrics::PValue::Degenerate => {
            assert_eq!(recorded.as_str(), Some("Degenerate"));
        }
    }
}

#[test]
fn missing_data_is_a_data_error() {
    let f = fixture();
    let out = run(&[
        "pretrain",
        "--role",
        "student",
        "--config",
        &f.config(),
        "--data",
        &f.path("no_such_dataset"),
        "--out",
        &f.path("runs/doomed"),
    ]);
    assert_eq!(out.status.code(), Some(3), "data error category");
}
