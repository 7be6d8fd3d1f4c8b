//! The distillation-direction benchmark: for each seed, synthesize a
//! dataset, pretrain teacher and student, distill the student once with the
//! hierarchical discriminator and once with the plain one, and compare
//! held-out enhancing-class Dice on >= 30 test phantoms.
//!
//! Protocol notes: the teacher needs k = 8 at this scale (at k = 4 the four
//! input modalities compete for four first-layer filters and the enhancing
//! cue is unreliable); pretraining skips augmentation and raises the
//! learning rate to 1e-3 because a few hundred steps on 32^2 volumes sit far
//! from the full-scale regime; distillation runs the protocol settings
//! (lr 2e-4, beta1 0.5, lambda 0.2, gate 0.8). Both distillation variants
//! start from the same pretrained checkpoints.

use std::fmt;
use std::path::Path;

use hadnet_core::io::cases::{Manifest, Split};
use hadnet_core::metrics::DiceTriple;
use hadnet_core::nets::{NetworkConfig, SegNet};
use hadnet_core::synthdata::{generate_dataset, PhantomConfig};
use hadnet_core::train::data::{load_split, TrainData};
use hadnet_core::train::{
    pretrain, run_distillation, validate_net, DistillConfig, PretrainConfig, Role,
};

pub const SEEDS: [u64; 3] = [101, 202, 303];
pub const CASES: usize = 44;
pub const SPLIT: (f64, f64, f64) = (0.25, 0.07, 0.68); // 11 / 3 / 30

#[derive(Debug, Clone, Copy)]
pub struct SeedOutcome {
    pub seed: u64,
    pub teacher_et: f64,
    pub pretrained_et: f64,
    pub had_et: f64,
    pub ad_et: f64,
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub per_seed: Vec<SeedOutcome>,
    pub median_had_et: f64,
    pub median_pretrained_et: f64,
    pub had_ge_ad_seeds: usize,
}

impl fmt::Display for BenchmarkOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.per_seed {
            writeln!(
                f,
                "seed {}: teacher ET {:.3} | pretrained ET {:.3} | HAD ET {:.3} | AD ET {:.3}",
                s.seed, s.teacher_et, s.pretrained_et, s.had_et, s.ad_et
            )?;
        }
        write!(
            f,
            "median ET: HAD {:.3}, pretrained {:.3}; HAD >= AD in {}/{} seeds",
            self.median_had_et,
            self.median_pretrained_et,
            self.had_ge_ad_seeds,
            self.per_seed.len()
        )
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

fn pre_modalities() -> Vec<String> {
    vec!["t1".into(), "t2".into(), "flair".into()]
}

fn all_modalities() -> Vec<String> {
    vec!["t1".into(), "t2".into(), "flair".into(), "t1ce".into()]
}

fn net_config(in_channels: usize) -> NetworkConfig {
    NetworkConfig {
        k: 8,
        scales: 4,
        dropout_p: 0.2,
        lrelu_slope: 0.01,
        in_channels,
        num_classes: 4,
        spatial_rank: 2,
    }
}

fn pretrain_config() -> PretrainConfig {
    PretrainConfig {
        epochs: 100,
        lr: 1e-3,
        plateau_patience: 15,
        augment: false,
        ..PretrainConfig::default()
    }
}

fn distill_config(hierarchical: bool) -> DistillConfig {
    DistillConfig {
        epochs: 100,
        hierarchical,
        ce_weight_epoch_offset: pretrain_config().epochs,
        ..DistillConfig::default()
    }
}

fn test_et(ckpt: &Path, test_cases: &[hadnet_core::train::data::Sample<f32>], modalities: &[String]) -> f64 {
    let (net, _) = SegNet::<f32>::load(ckpt).unwrap();
    let (mean, _): (DiceTriple, _) = validate_net(&net, test_cases, modalities).unwrap();
    mean.et
}

fn run_seed(seed: u64) -> SeedOutcome {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let phantom = PhantomConfig {
        dims: vec![32, 32],
        seed,
        ..PhantomConfig::default()
    };
    generate_dataset::<f32>(&phantom, CASES, SPLIT, &data_dir).unwrap();
    let data = TrainData::<f32>::load(&data_dir, &all_modalities(), None).unwrap();

    let ptr = pretrain_config();
    let teacher_run = dir.path().join("teacher");
    pretrain(
        net_config(4),
        &data,
        &all_modalities(),
        &ptr,
        seed,
        Role::Teacher,
        &teacher_run,
        false,
    )
    .unwrap();
    let student_run = dir.path().join("student");
    pretrain(
        net_config(3),
        &data,
        &pre_modalities(),
        &ptr,
        seed,
        Role::Student,
        &student_run,
        false,
    )
    .unwrap();
    let teacher_ckpt = teacher_run.join("ckpt_best");
    let student_ckpt = student_run.join("ckpt_best");

    // The two distillation variants are independent given the fixed
    // pretrained checkpoints; run them on both cores.
    let had_run = dir.path().join("had");
    let ad_run = dir.path().join("ad");
    let (r_had, r_ad) = rayon::join(
        || {
            run_distillation(
                &teacher_ckpt,
                &student_ckpt,
                &data,
                &pre_modalities(),
                &all_modalities(),
                &distill_config(true),
                seed,
                &had_run,
                false,
            )
        },
        || {
            run_distillation(
                &teacher_ckpt,
                &student_ckpt,
                &data,
                &pre_modalities(),
                &all_modalities(),
                &distill_config(false),
                seed,
                &ad_run,
                false,
            )
        },
    );
    r_had.unwrap();
    r_ad.unwrap();

    let manifest = Manifest::read(&data_dir).unwrap();
    let test_cases =
        load_split::<f32>(&data_dir, &manifest, Split::Test, &all_modalities(), None).unwrap();
    assert!(test_cases.len() >= 30, "benchmark needs >= 30 test phantoms");

    SeedOutcome {
        seed,
        teacher_et: test_et(&teacher_ckpt, &test_cases, &all_modalities()),
        pretrained_et: test_et(&student_ckpt, &test_cases, &pre_modalities()),
        had_et: test_et(&had_run.join("ckpt_best"), &test_cases, &pre_modalities()),
        ad_et: test_et(&ad_run.join("ckpt_best"), &test_cases, &pre_modalities()),
    }
}

pub fn run_three_seeds() -> BenchmarkOutcome {
    let per_seed: Vec<SeedOutcome> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    let median_had_et = median(per_seed.iter().map(|s| s.had_et).collect());
    let median_pretrained_et = median(per_seed.iter().map(|s| s.pretrained_et).collect());
    let had_ge_ad_seeds = per_seed.iter().filter(|s| s.had_et >= s.ad_et).count();
    BenchmarkOutcome {
        per_seed,
        median_had_et,
        median_pretrained_et,
        had_ge_ad_seeds,
    }
}
