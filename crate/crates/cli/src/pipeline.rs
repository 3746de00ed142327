//! Dataset preparation, training stages and inference shared by the
//! subcommands.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::info;
use onh_core::data_pipeline::dataset::{canonical_stats, depth_scaling, scale_depth, LoadedSample};
use onh_core::data_pipeline::{augment_all, normalize_to_canonical, CanonicalStats, FundusImage, Sample, Target};
use onh_core::evaluation::depth_metrics;
use onh_core::networks::{forward_depth, forward_seg, Model};
use onh_core::pseudo_depth::make_pseudo_depth;
use onh_core::raster::{DepthMap, Grid, ProbabilityMap};
use onh_core::training::{
    fine_tune_init, warm_start, Checkpoint, Example, ExampleTarget, LogRecord, Objective, PretrainTask, RunHooks,
    TrainSummary, Trainer,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{GuideSource, PretrainKind, RunConfig};

pub const META_GUIDE: &str = "guide";
pub const META_TASK: &str = "task";
pub const META_LOSS: &str = "loss";

pub fn normalize(s: &LoadedSample, canonical: &CanonicalStats) -> anyhow::Result<FundusImage> {
    normalize_to_canonical(&s.image, canonical).with_context(|| format!("normalizing {}", s.id))
}

/// Seeded split of `samples` into `(fit, validation)`; validation is empty
/// when the fraction rounds to zero samples.
pub fn split_validation(samples: &[LoadedSample], fraction: f64, seed: u64) -> (Vec<LoadedSample>, Vec<LoadedSample>) {
    let n_val = (samples.len() as f64 * fraction).floor() as usize;
    if n_val == 0 || n_val >= samples.len() {
        return (samples.to_vec(), Vec::new());
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].id.cmp(&samples[b].id));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5A17_5A17));
    let (val, fit) = order.split_at(n_val);
    let pick = |idx: &[usize]| {
        let mut v: Vec<LoadedSample> = idx.iter().map(|&i| samples[i].clone()).collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    };
    (pick(fit), pick(val))
}

fn to_examples(samples: Vec<Sample>) -> Vec<Example> {
    samples.iter().map(Example::from_sample).collect()
}

fn augmented(samples: Vec<Sample>, cfg: &RunConfig, augment: bool) -> anyhow::Result<Vec<Sample>> {
    Ok(if augment {
        augment_all(&samples, &cfg.data.augment.policy(cfg.seed))?
    } else {
        samples
    })
}

/// Pretraining pairs: pseudo-depth targets, or the clean image clamped to
/// the head's `[0, 1]` range for denoising.
pub fn pretrain_examples(
    samples: &[LoadedSample],
    canonical: &CanonicalStats,
    task: PretrainTask,
    cfg: &RunConfig,
    augment: bool,
) -> anyhow::Result<Vec<Example>> {
    let mut base = Vec::with_capacity(samples.len());
    for s in samples {
        let target = match task {
            PretrainTask::PseudoDepth => make_pseudo_depth(&s.image)?.values,
            PretrainTask::Denoising { .. } => Grid::filled(s.image.height(), s.image.width(), 0.0),
        };
        base.push(Sample {
            image: normalize(s, canonical)?,
            target: Target::Depth(target),
            guide: None,
        });
    }
    let out = augmented(base, cfg, augment)?;
    Ok(match task {
        PretrainTask::PseudoDepth => to_examples(out),
        PretrainTask::Denoising { .. } => out
            .iter()
            .map(|s| {
                let image = s.image.to_tensor();
                Example {
                    target: ExampleTarget::Map(image.map(|v| v.clamp(0.0, 1.0))),
                    image,
                    guide: None,
                }
            })
            .collect(),
    })
}

pub fn depth_examples(
    samples: &[LoadedSample],
    canonical: &CanonicalStats,
    scaling: (f64, f64),
    cfg: &RunConfig,
    augment: bool,
) -> anyhow::Result<Vec<Example>> {
    let mut base = Vec::with_capacity(samples.len());
    for s in samples {
        let depth = s.depth.as_ref().with_context(|| format!("sample {} has no depth map", s.id))?;
        base.push(Sample {
            image: normalize(s, canonical)?,
            target: Target::Depth(scale_depth(depth, scaling)),
            guide: None,
        });
    }
    Ok(to_examples(augmented(base, cfg, augment)?))
}

pub fn seg_examples(
    samples: &[LoadedSample],
    guides: &[Option<DepthMap>],
    canonical: &CanonicalStats,
    cfg: &RunConfig,
    augment: bool,
) -> anyhow::Result<Vec<Example>> {
    let mut base = Vec::with_capacity(samples.len());
    for (s, g) in samples.iter().zip(guides) {
        let labels = s.labels.clone().with_context(|| format!("sample {} has no label map", s.id))?;
        base.push(Sample {
            image: normalize(s, canonical)?,
            target: Target::Labels(labels),
            guide: g.clone(),
        });
    }
    Ok(to_examples(augmented(base, cfg, augment)?))
}

#[derive(Serialize)]
struct StageReport<'a> {
    stage: &'a str,
    steps: u64,
    epochs: usize,
    best_val: Option<f64>,
    best_epoch: Option<usize>,
    stopped_early: bool,
    final_loss: Option<f64>,
}

/// Trains one stage inside `dir`, writing `train_log.jsonl`, `best.ckpt`,
/// `last.ckpt`, the restored `model.ckpt` and `summary.json`.
pub fn train_stage(
    dir: &Path,
    stage: &str,
    trainer: &mut Trainer,
    train: &[Example],
    val: &[Example],
    template: Checkpoint,
) -> anyhow::Result<(Checkpoint, TrainSummary)> {
    fs::create_dir_all(dir)?;
    let mut log = BufWriter::new(File::create(dir.join("train_log.jsonl"))?);
    let mut sink = |r: &LogRecord| -> onh_core::Result<()> {
        serde_json::to_writer(&mut log, r)?;
        log.write_all(b"\n")?;
        Ok(())
    };
    info!("{stage}: {} training / {} validation examples", train.len(), val.len());
    let summary = trainer.run(
        train,
        val,
        &mut RunHooks {
            checkpoint_dir: Some(dir),
            on_record: Some(&mut sink),
            template: Some(template.clone()),
        },
    )?;
    log.flush()?;
    drop(log);
    let mut ckpt = trainer.checkpoint(Some(&template));
    ckpt.optimizer = None;
    ckpt.save(&dir.join("model.ckpt"))?;
    let report = StageReport {
        stage,
        steps: summary.steps,
        epochs: summary.epochs,
        best_val: summary.best_val,
        best_epoch: summary.best_epoch,
        stopped_early: summary.stopped_early,
        final_loss: summary.losses.last().copied(),
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    info!("{stage}: {} steps, best validation {:?}", summary.steps, summary.best_val);
    Ok((ckpt, summary))
}

fn template(model: &Model, canonical: CanonicalStats, depth_scaling: Option<(f64, f64)>, meta: &[(&str, String)]) -> Checkpoint {
    Checkpoint {
        canonical: Some(canonical),
        depth_scaling,
        metadata: meta.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        ..Checkpoint::new(model.clone())
    }
}

/// Pretrains the depth trunk on `samples` in `dir`.
pub fn run_pretrain(
    dir: &Path,
    cfg: &RunConfig,
    kind: PretrainKind,
    samples: &[LoadedSample],
) -> anyhow::Result<Checkpoint> {
    let task = cfg.pretrain.task(kind).context("no pretraining task selected")?;
    let canonical = canonical_stats(samples, cfg.data.canonical_id.as_deref())?;
    let (fit, val) = split_validation(samples, cfg.data.validation_fraction, cfg.seed);
    let train = pretrain_examples(&fit, &canonical, task, cfg, true)?;
    let val = pretrain_examples(&val, &canonical, task, cfg, false)?;
    let model_cfg = match task {
        PretrainTask::Denoising { .. } => cfg.denoising_model(),
        PretrainTask::PseudoDepth => cfg.depth_model(),
    };
    let model = Model::build(model_cfg, cfg.seed)?;
    let task_name = match kind {
        PretrainKind::Denoising => "denoising",
        _ => "pseudo_depth",
    };
    let tpl = template(&model, canonical, None, &[(META_TASK, format!("pretrain_{task_name}"))]);
    let mut trainer = Trainer::new(model, cfg.pretrain.train.train_config(cfg.seed), task.objective()?)?;
    Ok(train_stage(dir, "pretrain", &mut trainer, &train, &val, tpl)?.0)
}

pub struct DepthRun {
    pub checkpoint: Checkpoint,
    pub pretrain: Option<Checkpoint>,
    pub summary: TrainSummary,
}

/// Depth training in `dir`, optionally preceded by pretraining in
/// `dir/pretrain` on `pretrain_pool` (the training set when empty).
pub fn run_depth(
    dir: &Path,
    cfg: &RunConfig,
    train_samples: &[LoadedSample],
    pretrain_kind: PretrainKind,
    pretrain_pool: &[LoadedSample],
    fine_tune_from: Option<&Path>,
) -> anyhow::Result<DepthRun> {
    let pretrain = if pretrain_kind != PretrainKind::None {
        let pool = if pretrain_pool.is_empty() { train_samples } else { pretrain_pool };
        Some(run_pretrain(&dir.join("pretrain"), cfg, pretrain_kind, pool)?)
    } else {
        None
    };
    let mut model = Model::build(cfg.depth_model(), cfg.seed)?;
    let mut canonical = canonical_stats(train_samples, cfg.data.canonical_id.as_deref())?;
    if let Some(p) = &pretrain {
        let copied = warm_start(&mut model.params, &p.model.params)?;
        info!("warm start copied {copied} of {} tensors", model.params.len());
        canonical = p.canonical.unwrap_or(canonical);
    }
    if let Some(path) = fine_tune_from {
        let src = fine_tune_init(&mut model, path)?;
        canonical = src.canonical.unwrap_or(canonical);
    }
    let scaling = depth_scaling(train_samples)?;
    let (fit, val) = split_validation(train_samples, cfg.data.validation_fraction, cfg.seed);
    let train = depth_examples(&fit, &canonical, scaling, cfg, true)?;
    let val = depth_examples(&val, &canonical, scaling, cfg, false)?;
    let objective = Objective::Regression { loss: cfg.depth.loss };
    let mut tc = cfg.depth.train.train_config(cfg.seed);
    tc.fine_tune_from = fine_tune_from.map(Path::to_path_buf);
    let loss = serde_json::to_value(cfg.depth.loss)?.as_str().unwrap_or_default().to_string();
    let tpl = template(
        &model,
        canonical,
        Some(scaling),
        &[(META_TASK, "depth".into()), (META_LOSS, loss)],
    );
    let mut trainer = Trainer::new(model, tc, objective)?;
    let (checkpoint, summary) = train_stage(dir, "depth", &mut trainer, &train, &val, tpl)?;
    Ok(DepthRun {
        checkpoint,
        pretrain,
        summary,
    })
}

/// Depth in `[0, 1]` for one sample, normalized with the checkpoint's stats.
pub fn predict_depth(ckpt: &Checkpoint, s: &LoadedSample) -> anyhow::Result<DepthMap> {
    let canonical = ckpt.canonical.context("checkpoint has no canonical image statistics")?;
    Ok(forward_depth(&ckpt.model, &normalize(s, &canonical)?)?)
}

/// Guide maps for `samples` from the selected source.
pub fn guide_maps(
    source: GuideSource,
    samples: &[LoadedSample],
    depth_ckpt: Option<&Checkpoint>,
) -> anyhow::Result<Vec<Option<DepthMap>>> {
    samples
        .iter()
        .map(|s| {
            Ok(match source {
                GuideSource::None => None,
                GuideSource::PseudoDepth => Some(make_pseudo_depth(&s.image)?.values),
                GuideSource::Depth => match (depth_ckpt, &s.guide) {
                    (Some(c), _) => Some(predict_depth(c, s)?),
                    (None, Some(g)) => Some(g.clone()),
                    (None, None) => bail!(
                        "sample {}: depth guide needs --depth-checkpoint or a guide column in the manifest",
                        s.id
                    ),
                },
            })
        })
        .collect()
}

pub struct SegRun {
    pub checkpoint: Checkpoint,
    pub summary: TrainSummary,
}

pub fn run_seg(
    dir: &Path,
    cfg: &RunConfig,
    train_samples: &[LoadedSample],
    guide: GuideSource,
    depth_ckpt: Option<&Checkpoint>,
    fine_tune_from: Option<&Path>,
) -> anyhow::Result<SegRun> {
    let mut model = Model::build(cfg.seg_model(guide), cfg.seed)?;
    let mut canonical = canonical_stats(train_samples, cfg.data.canonical_id.as_deref())?;
    if let Some(path) = fine_tune_from {
        let src = fine_tune_init(&mut model, path)?;
        if let Some(g) = src.metadata.get(META_GUIDE) {
            if g != guide.as_str() {
                bail!("{} was trained with guide {g}, not {}", path.display(), guide.as_str());
            }
        }
        canonical = src.canonical.unwrap_or(canonical);
    }
    let (fit, val) = split_validation(train_samples, cfg.data.validation_fraction, cfg.seed);
    let train = seg_examples(&fit, &guide_maps(guide, &fit, depth_ckpt)?, &canonical, cfg, true)?;
    let val = seg_examples(&val, &guide_maps(guide, &val, depth_ckpt)?, &canonical, cfg, false)?;
    let mut tc = cfg.seg.train.train_config(cfg.seed);
    tc.fine_tune_from = fine_tune_from.map(Path::to_path_buf);
    let tpl = template(
        &model,
        canonical,
        None,
        &[(META_TASK, "segmentation".into()), (META_GUIDE, guide.as_str().into())],
    );
    let mut trainer = Trainer::new(model, tc, Objective::Segmentation)?;
    let (checkpoint, summary) = train_stage(dir, "segmentation", &mut trainer, &train, &val, tpl)?;
    Ok(SegRun { checkpoint, summary })
}

pub fn predict_seg(ckpt: &Checkpoint, s: &LoadedSample, guide: Option<&DepthMap>) -> anyhow::Result<ProbabilityMap> {
    let canonical = ckpt.canonical.context("checkpoint has no canonical image statistics")?;
    Ok(forward_seg(&ckpt.model, &normalize(s, &canonical)?, guide)?)
}

/// Guide source a segmentation checkpoint was trained with.
pub fn checkpoint_guide(ckpt: &Checkpoint) -> GuideSource {
    match ckpt.metadata.get(META_GUIDE).and_then(|g| GuideSource::parse(g)) {
        Some(g) => g,
        None if ckpt.model.is_guided() => GuideSource::Depth,
        None => GuideSource::None,
    }
}

/// Held-out depth scores of one sample: `(rmse, corr)`.
pub fn score_depth(ckpt: &Checkpoint, s: &LoadedSample) -> anyhow::Result<(f64, f64)> {
    let gt = s.depth.as_ref().with_context(|| format!("sample {} has no depth map", s.id))?;
    Ok(depth_metrics(&predict_depth(ckpt, s)?, gt)?)
}

/// `path` made absolute against the working directory.
pub fn absolute(path: &Path) -> anyhow::Result<PathBuf> {
    Ok(std::path::absolute(path)?)
}
