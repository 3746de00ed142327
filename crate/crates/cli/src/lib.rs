//! `onh` command-line front end: subcommands wiring the core pipeline into
//! reproducible runs under an output directory.

pub mod args;
pub mod commands;
pub mod config;
pub mod pipeline;
pub mod report;

use std::ffi::OsString;
use std::fs;

use clap::error::ErrorKind;
use clap::Parser;

use crate::args::{Cli, Command};
use crate::commands::{EvaluateArgs, InferSegArgs, TrainDepthArgs, TrainSegArgs};
use crate::report::{Outputs, RunManifest};

/// Bad invocation detected after parsing, such as a missing input file.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let argv: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli.command, argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            if let Some(u) = e.downcast_ref::<UsageError>() {
                eprintln!("error: {u}\n\nFor more information, try '--help'.");
                EXIT_USAGE
            } else {
                eprintln!("error: {e:#}");
                EXIT_FAILURE
            }
        }
    }
}

fn execute(cmd: &Command, argv: Vec<String>) -> anyhow::Result<()> {
    let cfg = cmd.resolve().map_err(|e| UsageError(format!("{e:#}")))?;
    cfg.validate().map_err(|e| UsageError(format!("invalid configuration: {e:#}")))?;
    commands::check_inputs(cmd)?;
    let common = cmd.common();
    if common.dry_run {
        println!("# {} (dry run)\n{}", cmd.name(), cfg.to_toml()?);
        return Ok(());
    }
    fs::create_dir_all(&common.out)?;
    let mut out = Outputs::new(&common.out);
    fs::write(out.file("config.toml")?, cfg.to_toml()?)?;
    match cmd {
        Command::PseudoDepth { manifest, .. } => commands::pseudo_depth(manifest, &cfg, &mut out)?,
        Command::Pretrain { manifest, .. } => commands::pretrain(manifest, &cfg, &mut out)?,
        Command::TrainDepth {
            manifest,
            pretrain_manifest,
            folds,
            fold,
            fine_tune_from,
            ..
        } => commands::train_depth(
            TrainDepthArgs {
                manifest,
                pretrain_manifest,
                folds: *folds,
                fold: *fold,
                fine_tune_from: fine_tune_from.as_deref(),
            },
            &cfg,
            "depth",
            &mut out,
        )?,
        Command::TrainSeg {
            manifest,
            depth_checkpoint,
            split,
            fine_tune_from,
            ..
        } => commands::train_seg(
            TrainSegArgs {
                manifest,
                depth_checkpoint: depth_checkpoint.as_deref(),
                split: *split,
                fine_tune_from: fine_tune_from.as_deref(),
            },
            &cfg,
            &mut out,
        )?,
        Command::InferDepth { checkpoint, manifest, .. } => commands::infer_depth(checkpoint, manifest, &mut out)?,
        Command::InferSeg {
            checkpoint,
            manifest,
            guide,
            depth_checkpoint,
            crf,
            ..
        } => commands::infer_seg(
            InferSegArgs {
                checkpoint,
                manifest,
                guide: *guide,
                depth_checkpoint: depth_checkpoint.as_deref(),
                crf: crf.crf,
            },
            &cfg,
            &mut out,
        )?,
        Command::CrfRefine { prob, image, depth, .. } => {
            commands::crf_refine(prob, image, depth.as_deref(), &cfg, &mut out)?
        }
        Command::Evaluate {
            manifest,
            depth_pred,
            seg_pred,
            name,
            ..
        } => commands::evaluate(
            EvaluateArgs {
                manifest,
                depth_pred: depth_pred.as_deref(),
                seg_pred: seg_pred.as_deref(),
                name,
            },
            &cfg,
            &mut out,
        )?,
        Command::RocPlot { roc, label, .. } => commands::roc_plot(roc, label, &mut out)?,
    }
    let run_json = out.file("run.json")?;
    let manifest = RunManifest {
        command: cmd.name().into(),
        argv,
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").into(),
        outputs: out.into_files(),
    };
    report::write_json(&run_json, &manifest)
}
