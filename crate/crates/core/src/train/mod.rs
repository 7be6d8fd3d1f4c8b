//! Training orchestration: supervised pretraining of the teacher and student
//! networks, and the adversarial distillation stage where a frozen teacher
//! guides the student through a (hierarchical) patch discriminator.
//!
//! Determinism contract: every stochastic draw comes from a stream derived
//! from `(seed, domain, epoch, step)`, data order is a seeded permutation per
//! epoch, and optimizer moments serialize exactly — so reruns and resumed
//! runs reproduce checkpoints and `log.jsonl` bitwise.
//!
//! Run directory layout: `config.toml` (written by the caller), `log.jsonl`
//! (one record per epoch), `ckpt_best`, `ckpt_last`, `state`.

pub mod augment;
pub mod data;
pub mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::checkpoint::TensorArchive;
use crate::losses::{
    decay_weights, hd_accuracy, hd_loss, mse_to_constant, mse_to_constant_grad,
    weighted_ce_with_grad, ClassWeights,
};
use crate::metrics::{evaluate_case, DiceTriple};
use crate::nets::{
    params_digest, probs_to_labels, DiscriminatorConfig, GradStore, NetworkConfig,
    PatchDiscriminator, SegForward, SegNet,
};
use crate::rng::{self, StreamDomain};
use crate::scalar::Scalar;
use crate::train::data::{train_class_weights, Sample, TrainData};
use crate::train::optim::{Adam, AdamConfig};

pub const LOG_FILE: &str = "log.jsonl";
pub const CKPT_BEST: &str = "ckpt_best";
pub const CKPT_LAST: &str = "ckpt_last";
pub const STATE_FILE: &str = "state";
pub const CONFIG_FILE: &str = "config.toml";

/// Stage-1 hyper-parameters (defaults follow the reference protocol).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub plateau_patience: usize,
    pub lr_halving_factor: f64,
    pub augment: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 400,
            batch_size: 1,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            plateau_patience: 30,
            lr_halving_factor: 0.5,
            augment: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.plateau_patience == 0 {
            return Err(Error::Config("plateau_patience must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.lr_halving_factor) || self.lr_halving_factor <= 0.0 {
            return Err(Error::Config("lr_halving_factor must lie in (0, 1)".into()));
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Stage-2 hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Fixed learning rate for both the student and the discriminator.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Weight of the adversarial term in the student loss.
    pub lambda: f64,
    /// Skip the discriminator update when its accuracy exceeds this gate.
    pub hd_accuracy_gate: f64,
    /// true = hierarchical discriminator, false = segmentations only.
    pub hierarchical: bool,
    pub augment: bool,
    /// CE weights continue the stage-1 decay schedule from this epoch offset.
    pub ce_weight_epoch_offset: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            epochs: 800,
            batch_size: 1,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            lambda: 0.2,
            hd_accuracy_gate: 0.8,
            hierarchical: true,
            augment: false,
            ce_weight_epoch_offset: 400,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if !(self.hd_accuracy_gate > 0.5 && self.hd_accuracy_gate <= 1.0) {
            return Err(Error::Config(format!(
                "hd_accuracy_gate {} outside (0.5, 1]",
                self.hd_accuracy_gate
            )));
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Which network a run trains; tags decorrelate init streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    pub fn tag(self) -> u64 {
        match self {
            Role::Teacher => 1,
            Role::Student => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }
}

pub const DISC_INIT_TAG: u64 = 3;

/// Serializable training progress shared by both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken (student side).
    pub step: u64,
    pub lr_current: f64,
    pub best_val_score: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stagnation_counter: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(seed: u64, lr: f64) -> Self {
        TrainState {
            epoch: 0,
            step: 0,
            lr_current: lr,
            best_val_score: None,
            best_epoch: None,
            stagnation_counter: 0,
            seed,
        }
    }
}

/// Plateau LR schedule: a strict improvement resets the stagnation counter
/// and the best score; `patience` consecutive non-improvements multiply the
/// learning rate by `factor` and reset the counter. Returns whether the
/// score improved.
pub fn plateau_schedule(
    state: &mut TrainState,
    val_score: f64,
    patience: usize,
    factor: f64,
) -> bool {
    let improved = match state.best_val_score {
        None => true,
        Some(best) => val_score > best,
    };
    if improved {
        state.best_val_score = Some(val_score);
        state.best_epoch = Some(state.epoch);
        state.stagnation_counter = 0;
    } else {
        state.stagnation_counter += 1;
        if state.stagnation_counter >= patience {
            state.lr_current *= factor;
            state.stagnation_counter = 0;
        }
    }
    improved
}

/// Deterministic forward evaluation of a network over cases: per-case Dice
/// triples plus per-region means.
pub fn validate_net<T: Scalar>(
    net: &SegNet<T>,
    cases: &[Sample<T>],
    modalities: &[String],
) -> Result<(DiceTriple, Vec<(String, DiceTriple)>)> {
    let mut per_case = Vec::with_capacity(cases.len());
    let mut sums = [0.0f64; 3];
    for case in cases {
        let x = case.stack(modalities)?;
        let out = net.forward(&x, None)?;
        let pred = probs_to_labels(&out.probs);
        let triple = evaluate_case(&pred, &case.seg)?;
        sums[0] += triple.wt;
        sums[1] += triple.tc;
        sums[2] += triple.et;
        per_case.push((case.id.clone(), triple));
    }
    let n = cases.len() as f64;
    Ok((
        DiceTriple {
            wt: sums[0] / n,
            tc: sums[1] / n,
            et: sums[2] / n,
        },
        per_case,
    ))
}

fn append_log_line<R: Serialize>(run_dir: &Path, record: &R) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(run_dir.join(LOG_FILE))?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

/// Keep only the first `epochs` lines of the log (resume after interrupt).
fn truncate_log(run_dir: &Path, epochs: usize) -> Result<()> {
    let path = run_dir.join(LOG_FILE);
    if !path.exists() {
        if epochs > 0 {
            return Err(Error::Checkpoint(format!(
                "resume: {} missing but state expects {epochs} epochs",
                path.display()
            )));
        }
        return Ok(());
    }
    let text = std::fs::read_to_string(&path)?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() < epochs {
        return Err(Error::Checkpoint(format!(
            "resume: log has {} lines, state expects {epochs}",
            lines.len()
        )));
    }
    let mut kept = lines[..epochs].join("\n");
    if epochs > 0 {
        kept.push('\n');
    }
    std::fs::write(&path, kept)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage 1: pretraining
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct PretrainLogRecord {
    pub epoch: usize,
    pub train_ce: f64,
    pub val_wt: f64,
    pub val_tc: f64,
    pub val_et: f64,
    pub val_mean: f64,
    pub lr: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_mean_dice: Option<f64>,
    pub ckpt_best: PathBuf,
    pub ckpt_last: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct PretrainStateMeta {
    kind: String,
    role: Role,
    state: TrainState,
    adam_t: u64,
    class_weights: ClassWeights,
}

/// Supervised pretraining of one segmentation network. The teacher variant
/// receives all modalities, the student the pre-contrast subset; the
/// procedure is identical otherwise. Returns with `ckpt_best` holding the
/// checkpoint that scored the best mean validation Dice.
#[allow(clippy::too_many_arguments)]
pub fn pretrain<T: Scalar>(
    net_config: NetworkConfig,
    data: &TrainData<T>,
    modalities: &[String],
    cfg: &PretrainConfig,
    seed: u64,
    role: Role,
    run_dir: &Path,
    resume: bool,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    net_config.validate()?;
    if modalities.len() != net_config.in_channels {
        return Err(Error::Config(format!(
            "{} modalities for {} input channels",
            modalities.len(),
            net_config.in_channels
        )));
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("pretrain: empty train or val split".into()));
    }
    std::fs::create_dir_all(run_dir)?;

    let ckpt_best = run_dir.join(CKPT_BEST);
    let ckpt_last = run_dir.join(CKPT_LAST);
    let state_path = run_dir.join(STATE_FILE);

    let w0 = train_class_weights(&data.train);

    let (mut net, mut opt, mut state) = if resume && state_path.exists() {
        let archive = TensorArchive::<T>::read(&state_path)?;
        let meta: PretrainStateMeta = serde_json::from_value(archive.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("bad state file: {e}")))?;
        if meta.kind != "pretrain" {
            return Err(Error::Checkpoint(format!(
                "state file is a {} state, expected pretrain",
                meta.kind
            )));
        }
        let (net, _) = SegNet::<T>::load(&ckpt_last)?;
        if net.config != net_config {
            return Err(Error::Checkpoint(
                "resume: checkpoint config differs from requested config".into(),
            ));
        }
        let opt = Adam::load_from(cfg.adam(), meta.adam_t, &archive, "opt");
        (net, opt, meta.state)
    } else {
        let net = SegNet::<T>::init_seeded(net_config.clone(), seed, role.tag())?;
        (net, Adam::new(cfg.adam()), TrainState::new(seed, cfg.lr))
    };
    truncate_log(run_dir, state.epoch)?;

    let n_train = data.train.len();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let weights_e = decay_weights(&w0, epoch);
        let order = rng::permutation(
            &mut rng::stream(seed, StreamDomain::Shuffle, epoch as u64, role.tag()),
            n_train,
        );
        let mut ce_sum = 0.0f64;
        let mut pending = GradStore::<T>::new();
        let mut pending_count = 0usize;
        for (step, &idx) in order.iter().enumerate() {
            let sample = &data.train[idx];
            let seg_owned;
            let x;
            let y = if cfg.augment {
                let mut arng =
                    rng::stream(seed, StreamDomain::Augment, epoch as u64, step as u64);
                let (vol, seg) = augment::augment(&sample.vol, &sample.seg, &mut arng)?;
                x = vol.stack(modalities)?;
                seg_owned = seg;
                &seg_owned
            } else {
                x = sample.stack(modalities)?;
                &sample.seg
            };
            let mut drng = rng::stream(seed, StreamDomain::Dropout, epoch as u64, step as u64);
            let (out, cache) = net.forward_cached(&x, Some(&mut drng))?;
            let (ce, grad) = weighted_ce_with_grad(&out.probs, y, &weights_e, true)?;
            ce_sum += ce.to_f64_lossy();
            let (grads, _) = net.backward(&cache, &grad.expect("requested"), &[]);
            pending.merge(grads);
            pending_count += 1;
            if pending_count == cfg.batch_size || step + 1 == n_train {
                if pending_count > 1 {
                    pending.scale(T::from_f64(1.0 / pending_count as f64));
                }
                opt.step(&mut net, &pending, state.lr_current);
                state.step += 1;
                pending = GradStore::new();
                pending_count = 0;
            }
        }
        let train_ce = ce_sum / n_train as f64;

        let (val_mean, _) = validate_net(&net, &data.val, modalities)?;
        let val_metric = val_mean.mean();
        let lr_before = state.lr_current;
        let improved = plateau_schedule(
            &mut state,
            val_metric,
            cfg.plateau_patience,
            cfg.lr_halving_factor,
        );
        append_log_line(
            run_dir,
            &PretrainLogRecord {
                epoch,
                train_ce,
                val_wt: val_mean.wt,
                val_tc: val_mean.tc,
                val_et: val_mean.et,
                val_mean: val_metric,
                lr: lr_before,
                improved,
            },
        )?;
        if improved {
            net.save(&ckpt_best, role.name())?;
        }
        state.epoch += 1;
        net.save(&ckpt_last, role.name())?;
        let mut archive = TensorArchive::<T>::default();
        let adam_t = opt.save_into(&mut archive, "opt");
        archive.meta = serde_json::to_value(PretrainStateMeta {
            kind: "pretrain".into(),
            role,
            state: state.clone(),
            adam_t,
            class_weights: w0.clone(),
        })?;
        archive.write(&state_path)?;
    }

    Ok(PretrainOutcome {
        epochs_run: state.epoch,
        best_epoch: state.best_epoch,
        best_val_mean_dice: state.best_val_score,
        ckpt_best,
        ckpt_last,
    })
}

// ---------------------------------------------------------------------------
// Stage 2: adversarial distillation
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct DistillLogRecord {
    pub epoch: usize,
    pub ce: f64,
    pub adv: f64,
    pub total: f64,
    pub hd_loss: f64,
    pub hd_accuracy: f64,
    pub hd_update_fraction: f64,
    pub val_wt: f64,
    pub val_tc: f64,
    pub val_et: f64,
    pub lr: f64,
    pub teacher_digest: String,
    pub improved: bool,
}

/// Mutable stage-2 state: progress plus both optimizers.
#[derive(Debug)]
pub struct DistillState<T> {
    pub train: TrainState,
    pub opt_student: Adam<T>,
    pub opt_disc: Adam<T>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DistillEpochStats {
    pub ce: f64,
    pub adv: f64,
    pub total: f64,
    pub hd_loss: f64,
    pub hd_accuracy: f64,
    pub hd_update_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_et_dice: Option<f64>,
    pub teacher_digest: u64,
    pub ckpt_best: PathBuf,
    pub ckpt_last: PathBuf,
}

/// Teacher forwards are deterministic; with augmentation off they are
/// precomputed once per case.
pub fn teacher_forward_cache<T: Scalar>(
    teacher: &SegNet<T>,
    data: &TrainData<T>,
    all_modalities: &[String],
) -> Result<Vec<SegForward<T>>> {
    data.train
        .iter()
        .map(|sample| {
            let x = sample.stack(all_modalities)?;
            teacher.forward(&x, None)
        })
        .collect()
}

/// One distillation epoch over the training split.
///
/// Per iteration: the frozen teacher produces its segmentation and latents
/// deterministically; the student runs stochastically; the student updates on
/// `CE + lambda * MSE(D(student sample), 1)` with gradients flowing through
/// the discriminator into both the segmentation and (hierarchical mode) the
/// pyramid; then the discriminator accuracy is measured and, only if it does
/// not exceed the gate, the discriminator updates on its two-sided MSE loss.
#[allow(clippy::too_many_arguments)]
pub fn distill_epoch<T: Scalar>(
    student: &mut SegNet<T>,
    teacher: &SegNet<T>,
    disc: &mut PatchDiscriminator<T>,
    data: &TrainData<T>,
    pre_modalities: &[String],
    all_modalities: &[String],
    cfg: &DistillConfig,
    weights0: &ClassWeights,
    state: &mut DistillState<T>,
    teacher_cache: Option<&[SegForward<T>]>,
) -> Result<DistillEpochStats> {
    let seed = state.train.seed;
    let epoch = state.train.epoch;
    let n_train = data.train.len();
    let weights_e = decay_weights(weights0, cfg.ce_weight_epoch_offset + epoch);
    let order = rng::permutation(
        &mut rng::stream(seed, StreamDomain::Shuffle, epoch as u64, DISC_INIT_TAG),
        n_train,
    );

    let mut sums = DistillEpochStats {
        ce: 0.0,
        adv: 0.0,
        total: 0.0,
        hd_loss: 0.0,
        hd_accuracy: 0.0,
        hd_update_fraction: 0.0,
    };
    let hierarchical = disc.hierarchical();

    let mut pending_student = GradStore::<T>::new();
    let mut pending_disc = GradStore::<T>::new();
    let mut pending_student_count = 0usize;
    let mut pending_disc_count = 0usize;

    for (step, &idx) in order.iter().enumerate() {
        let sample = &data.train[idx];
        // Teacher pass (deterministic, dropout off).
        let teacher_owned;
        let seg_owned;
        let x_pre;
        let (t_out, y) = if cfg.augment {
            let mut arng = rng::stream(seed, StreamDomain::Augment, epoch as u64, step as u64);
            let (vol, seg) = augment::augment(&sample.vol, &sample.seg, &mut arng)?;
            let x_all = vol.stack(all_modalities)?;
            x_pre = vol.stack(pre_modalities)?;
            teacher_owned = teacher.forward(&x_all, None)?;
            seg_owned = seg;
            (&teacher_owned, &seg_owned)
        } else {
            x_pre = sample.stack(pre_modalities)?;
            match teacher_cache {
                Some(cache) => (&cache[idx], &sample.seg),
                None => {
                    let x_all = sample.stack(all_modalities)?;
                    teacher_owned = teacher.forward(&x_all, None)?;
                    (&teacher_owned, &sample.seg)
                }
            }
        };

        // Student pass (stochastic).
        let mut drng = rng::stream(seed, StreamDomain::Dropout, epoch as u64, step as u64);
        let (s_out, s_cache) = student.forward_cached(&x_pre, Some(&mut drng))?;

        // Discriminator verdict on the student sample.
        let s_pyr = hierarchical.then_some(&s_out.pyramid);
        let (scores_fake, disc_cache_fake) = disc.forward_cached(&x_pre, &s_out.probs, s_pyr)?;

        // Student update: CE + lambda * MSE(scores, 1).
        let (ce, g_probs_ce) = weighted_ce_with_grad(&s_out.probs, y, &weights_e, true)?;
        let ce = ce.to_f64_lossy();
        let adv = mse_to_constant(&scores_fake.scores, 1.0);
        let mut g_scores = mse_to_constant_grad(&scores_fake.scores, 1.0);
        g_scores.scale(T::from_f64(cfg.lambda));
        let (_, disc_input_grads) = disc.backward(&disc_cache_fake, &g_scores)?;
        let mut g_probs = g_probs_ce.expect("requested");
        g_probs.add_assign(&disc_input_grads.g_seg);
        let g_pyramid = if hierarchical {
            disc_input_grads.g_pyramid
        } else {
            Vec::new()
        };
        let (student_grads, _) = student.backward(&s_cache, &g_probs, &g_pyramid);
        pending_student.merge(student_grads);
        pending_student_count += 1;
        if pending_student_count == cfg.batch_size || step + 1 == n_train {
            if pending_student_count > 1 {
                pending_student.scale(T::from_f64(1.0 / pending_student_count as f64));
            }
            state.opt_student.step(student, &pending_student, cfg.lr);
            state.train.step += 1;
            pending_student = GradStore::new();
            pending_student_count = 0;
        }

        // Discriminator verdict on the teacher sample, accuracy gating, and
        // (conditionally) the discriminator update. The fake-side scores are
        // the pre-update student outputs; the discriminator itself has not
        // changed within this iteration.
        let t_pyr = hierarchical.then_some(&t_out.pyramid);
        let (scores_real, disc_cache_real) = disc.forward_cached(&x_pre, &t_out.probs, t_pyr)?;
        let acc = hd_accuracy(&scores_fake, &scores_real);
        let d_loss = hd_loss(&scores_fake, &scores_real)?;
        if acc <= cfg.hd_accuracy_gate {
            let g_fake = mse_to_constant_grad(&scores_fake.scores, 0.0);
            let g_real = mse_to_constant_grad(&scores_real.scores, 1.0);
            let (grads_fake, _) = disc.backward(&disc_cache_fake, &g_fake)?;
            let (grads_real, _) = disc.backward(&disc_cache_real, &g_real)?;
            pending_disc.merge(grads_fake);
            pending_disc.merge(grads_real);
            pending_disc_count += 1;
            sums.hd_update_fraction += 1.0;
        }
        if pending_disc_count > 0 && (pending_disc_count == cfg.batch_size || step + 1 == n_train)
        {
            if pending_disc_count > 1 {
                pending_disc.scale(T::from_f64(1.0 / pending_disc_count as f64));
            }
            state.opt_disc.step(disc, &pending_disc, cfg.lr);
            pending_disc = GradStore::new();
            pending_disc_count = 0;
        }

        sums.ce += ce;
        sums.adv += adv;
        sums.total += ce + cfg.lambda * adv;
        sums.hd_loss += d_loss;
        sums.hd_accuracy += acc;
    }

    let n = n_train as f64;
    state.train.epoch += 1;
    Ok(DistillEpochStats {
        ce: sums.ce / n,
        adv: sums.adv / n,
        total: sums.total / n,
        hd_loss: sums.hd_loss / n,
        hd_accuracy: sums.hd_accuracy / n,
        hd_update_fraction: sums.hd_update_fraction / n,
    })
}

#[derive(Serialize, Deserialize)]
struct DistillStateMeta {
    kind: String,
    state: TrainState,
    adam_student_t: u64,
    adam_disc_t: u64,
    class_weights: ClassWeights,
    disc_config: DiscriminatorConfig,
    teacher_digest: u64,
}

/// The full stage-2 run: load pretrained checkpoints, train student +
/// discriminator for `cfg.epochs`, select by validation ET Dice, emit the
/// per-epoch log, and keep everything resumable.
#[allow(clippy::too_many_arguments)]
pub fn run_distillation<T: Scalar>(
    teacher_ckpt: &Path,
    student_ckpt: &Path,
    data: &TrainData<T>,
    pre_modalities: &[String],
    all_modalities: &[String],
    cfg: &DistillConfig,
    seed: u64,
    run_dir: &Path,
    resume: bool,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("distill: empty train or val split".into()));
    }
    let (teacher, teacher_role) = SegNet::<T>::load(teacher_ckpt)?;
    let (student_init, student_role) = SegNet::<T>::load(student_ckpt)?;
    if teacher_role != Role::Teacher.name() || student_role != Role::Student.name() {
        return Err(Error::Checkpoint(format!(
            "checkpoint roles: teacher file says {teacher_role:?}, student file says {student_role:?}"
        )));
    }
    let tc = &teacher.config;
    let sc = &student_init.config;
    if tc.k != sc.k
        || tc.scales != sc.scales
        || tc.spatial_rank != sc.spatial_rank
        || tc.num_classes != sc.num_classes
    {
        return Err(Error::Checkpoint(format!(
            "incompatible checkpoints: teacher (k={}, scales={}, rank={}, classes={}) vs student (k={}, scales={}, rank={}, classes={})",
            tc.k, tc.scales, tc.spatial_rank, tc.num_classes,
            sc.k, sc.scales, sc.spatial_rank, sc.num_classes
        )));
    }
    if sc.in_channels != pre_modalities.len() || tc.in_channels != all_modalities.len() {
        return Err(Error::Checkpoint(format!(
            "channel mismatch: student {} vs {} pre modalities; teacher {} vs {} total",
            sc.in_channels,
            pre_modalities.len(),
            tc.in_channels,
            all_modalities.len()
        )));
    }
    std::fs::create_dir_all(run_dir)?;

    let ckpt_best = run_dir.join(CKPT_BEST);
    let ckpt_last = run_dir.join(CKPT_LAST);
    let state_path = run_dir.join(STATE_FILE);

    let teacher_digest = params_digest(&teacher);
    let w0 = train_class_weights(&data.train);
    let disc_config = DiscriminatorConfig {
        network: NetworkConfig {
            in_channels: pre_modalities.len(),
            ..sc.clone()
        },
        hierarchical: cfg.hierarchical,
    };

    let (mut student, mut disc, mut state) = if resume && state_path.exists() {
        let archive = TensorArchive::<T>::read(&state_path)?;
        let meta: DistillStateMeta = serde_json::from_value(archive.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("bad state file: {e}")))?;
        if meta.kind != "distill" {
            return Err(Error::Checkpoint(format!(
                "state file is a {} state, expected distill",
                meta.kind
            )));
        }
        if meta.disc_config != disc_config {
            return Err(Error::Checkpoint(
                "resume: discriminator config changed".into(),
            ));
        }
        if meta.teacher_digest != teacher_digest {
            return Err(Error::Checkpoint(
                "resume: teacher checkpoint differs from the original run".into(),
            ));
        }
        let (student, _) = SegNet::<T>::load(&ckpt_last)?;
        let mut disc = PatchDiscriminator::<T>::init_seeded(disc_config.clone(), seed, DISC_INIT_TAG)?;
        let disc_archive = TensorArchive::<T>::read(&run_dir.join("disc_last"))?;
        crate::nets::load_params(&mut disc, &disc_archive)?;
        let state = DistillState {
            train: meta.state,
            opt_student: Adam::load_from(cfg.adam(), meta.adam_student_t, &archive, "opt_s"),
            opt_disc: Adam::load_from(cfg.adam(), meta.adam_disc_t, &archive, "opt_d"),
        };
        (student, disc, state)
    } else {
        let disc = PatchDiscriminator::<T>::init_seeded(disc_config.clone(), seed, DISC_INIT_TAG)?;
        (
            student_init,
            disc,
            DistillState {
                train: TrainState::new(seed, cfg.lr),
                opt_student: Adam::new(cfg.adam()),
                opt_disc: Adam::new(cfg.adam()),
            },
        )
    };
    truncate_log(run_dir, state.train.epoch)?;

    let teacher_cache = if cfg.augment {
        None
    } else {
        Some(teacher_forward_cache(&teacher, data, all_modalities)?)
    };

    while state.train.epoch < cfg.epochs {
        let epoch = state.train.epoch;
        let stats = distill_epoch(
            &mut student,
            &teacher,
            &mut disc,
            data,
            pre_modalities,
            all_modalities,
            cfg,
            &w0,
            &mut state,
            teacher_cache.as_deref(),
        )?;

        let (val_mean, _) = validate_net(&student, &data.val, pre_modalities)?;
        // Stage-2 model selection tracks ET Dice, the deficit distillation
        // targets.
        let improved = match state.train.best_val_score {
            None => true,
            Some(best) => val_mean.et > best,
        };
        if improved {
            state.train.best_val_score = Some(val_mean.et);
            state.train.best_epoch = Some(epoch);
        }
        let digest_now = params_digest(&teacher);
        if digest_now != teacher_digest {
            return Err(Error::Checkpoint(
                "frozen-teacher invariant violated: teacher parameters changed".into(),
            ));
        }
        append_log_line(
            run_dir,
            &DistillLogRecord {
                epoch,
                ce: stats.ce,
                adv: stats.adv,
                total: stats.total,
                hd_loss: stats.hd_loss,
                hd_accuracy: stats.hd_accuracy,
                hd_update_fraction: stats.hd_update_fraction,
                val_wt: val_mean.wt,
                val_tc: val_mean.tc,
                val_et: val_mean.et,
                lr: cfg.lr,
                teacher_digest: format!("{teacher_digest:016x}"),
                improved,
            },
        )?;
        if improved {
            student.save(&ckpt_best, Role::Student.name())?;
        }
        student.save(&ckpt_last, Role::Student.name())?;
        disc.to_archive().write(&run_dir.join("disc_last"))?;
        let mut archive = TensorArchive::<T>::default();
        let adam_student_t = state.opt_student.save_into(&mut archive, "opt_s");
        let adam_disc_t = state.opt_disc.save_into(&mut archive, "opt_d");
        archive.meta = serde_json::to_value(DistillStateMeta {
            kind: "distill".into(),
            state: state.train.clone(),
            adam_student_t,
            adam_disc_t,
            class_weights: w0.clone(),
            disc_config: disc_config.clone(),
            teacher_digest,
        })?;
        archive.write(&state_path)?;
    }

    Ok(DistillOutcome {
        epochs_run: state.train.epoch,
        best_epoch: state.train.best_epoch,
        best_val_et_dice: state.train.best_val_score,
        teacher_digest,
        ckpt_best,
        ckpt_last,
    })
}
