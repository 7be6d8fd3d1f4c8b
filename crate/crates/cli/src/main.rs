//! `hadnet`: the pipeline CLI. Subcommands mirror the workflow stages:
//! synth -> pretrain (teacher, student) -> distill -> infer -> uncertainty ->
//! eval -> report. Every command validates inputs up front, is deterministic
//! given (resolved config, seed, data), and exits with a categorized code on
//! failure (2 config, 3 data, 4 checkpoint, 5 i/o).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "hadnet", version, about = "Adversarial distillation pipeline for missing-modality segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RoleArg {
    Teacher,
    Student,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    /// Hierarchical discriminator (consumes the feature pyramid).
    Hadnet,
    /// Non-hierarchical ablation (segmentations only).
    Adnet,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with a split manifest.
    Synth {
        #[arg(long, env = "HADNET_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long, env = "HADNET_OUT")]
        out: PathBuf,
        /// Override the configured case count.
        #[arg(long)]
        cases: Option<usize>,
        #[arg(long, env = "HADNET_SEED")]
        seed: Option<u64>,
    },
    /// Stage 1: supervised pretraining of one network.
    Pretrain {
        #[arg(long, value_enum)]
        role: RoleArg,
        #[arg(long, env = "HADNET_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, env = "HADNET_OUT")]
        out: PathBuf,
        #[arg(long, env = "HADNET_SEED")]
        seed: Option<u64>,
        /// Continue an interrupted run from its state file.
        #[arg(long)]
        resume: bool,
    },
    /// Stage 2: adversarial distillation of the student.
    Distill {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, env = "HADNET_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, env = "HADNET_OUT")]
        out: PathBuf,
        #[arg(long, env = "HADNET_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        resume: bool,
    },
    /// Deterministic inference with the student (pre-contrast inputs only).
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, env = "HADNET_CONFIG")]
        config: Option<PathBuf>,
        /// Single case directory; mutually exclusive with --data.
        #[arg(long, conflicts_with = "data")]
        case: Option<PathBuf>,
        /// Dataset directory (with manifest) for batch inference.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split to run on in batch mode.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, env = "HADNET_OUT")]
        out: PathBuf,
    },
    /// MC-dropout uncertainty maps, filtering and score.
    Uncertainty {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, env = "HADNET_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "data")]
        case: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, env = "HADNET_OUT")]
        out: PathBuf,
        /// MC sample count.
        #[arg(long)]
        samples: Option<usize>,
        /// Comma-separated thresholds.
        #[arg(long)]
        thresholds: Option<String>,
        /// Region the uncertainty targets (WT, TC or ET).
        #[arg(long)]
        region: Option<String>,
        #[arg(long, env = "HADNET_SEED")]
        seed: Option<u64>,
    },
    /// Dice evaluation of one prediction directory against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Restrict to one split (requires a manifest in --gt).
        #[arg(long)]
        split: Option<String>,
        #[arg(long, env = "HADNET_OUT")]
        out: PathBuf,
    },
    /// Multi-method comparison table with significance tests and overlays.
    Report {
        #[arg(long)]
        gt: PathBuf,
        /// Labeled prediction directories: name=dir (repeatable).
        #[arg(long = "pred", value_name = "NAME=DIR", required = true)]
        preds: Vec<String>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long, env = "HADNET_OUT")]
        out: PathBuf,
        /// Case ids to export slice overlays for (comma-separated).
        #[arg(long)]
        overlay_cases: Option<String>,
        /// Background modality for overlays.
        #[arg(long, default_value = "t1")]
        overlay_modality: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth {
            config,
            out,
            cases,
            seed,
        } => commands::synth(config.as_deref(), &out, cases, seed),
        Command::Pretrain {
            role,
            config,
            data,
            out,
            seed,
            resume,
        } => commands::pretrain_cmd(role, config.as_deref(), &data, &out, seed, resume),
        Command::Distill {
            mode,
            config,
            teacher,
            student,
            data,
            out,
            seed,
            resume,
        } => commands::distill_cmd(
            mode,
            config.as_deref(),
            &teacher,
            &student,
            &data,
            &out,
            seed,
            resume,
        ),
        Command::Infer {
            ckpt,
            config,
            case,
            data,
            split,
            out,
        } => commands::infer_cmd(&ckpt, config.as_deref(), case.as_deref(), data.as_deref(), &split, &out),
        Command::Uncertainty {
            ckpt,
            config,
            case,
            data,
            split,
            out,
            samples,
            thresholds,
            region,
            seed,
        } => commands::uncertainty_cmd(
            &ckpt,
            config.as_deref(),
            case.as_deref(),
            data.as_deref(),
            &split,
            &out,
            samples,
            thresholds.as_deref(),
            region.as_deref(),
            seed,
        ),
        Command::Eval {
            pred,
            gt,
            split,
            out,
        } => commands::eval_cmd(&pred, &gt, split.as_deref(), &out),
        Command::Report {
            gt,
            preds,
            split,
            out,
            overlay_cases,
            overlay_modality,
        } => commands::report_cmd(
            &gt,
            &preds,
            split.as_deref(),
            &out,
            overlay_cases.as_deref(),
            &overlay_modality,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
