//! Subcommand bodies. Each returns the artifacts it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::info;
use onh_core::crf::refine;
use onh_core::data_pipeline::dataset::{load_all, load_sample, LoadedSample};
use onh_core::data_pipeline::io::{
    load_depth, load_probabilities, load_rgb, save_depth_png16, save_labels_png, save_mask_png, save_probabilities,
};
use onh_core::data_pipeline::manifest::{Manifest, ManifestRow};
use onh_core::data_pipeline::{make_splits, resize_image, SplitMode};
use onh_core::evaluation::{aggregate, depth_metrics, render_roc_plot, roc_curve, score_segmentation, MetricsReport};
use onh_core::pseudo_depth::make_pseudo_depth;
use onh_core::training::Checkpoint;

use crate::args::{Command, SplitArg};
use crate::config::{GuideSource, PretrainKind, RunConfig};
use crate::pipeline::{self, absolute};
use crate::report::{self, FoldRow, Outputs, SplitFile, STAGE_FILES};
use crate::UsageError;

/// Loads a manifest, reporting a missing file as a usage error.
pub fn open_manifest(path: &Path) -> anyhow::Result<Manifest> {
    if !path.is_file() {
        return Err(UsageError(format!("manifest {} does not exist", path.display())).into());
    }
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(UsageError(format!("{what} {} does not exist", path.display())).into());
    }
    Ok(())
}

/// Input files named on the command line; checked before anything runs.
pub fn check_inputs(cmd: &Command) -> anyhow::Result<()> {
    let mut files: Vec<(&Path, &str)> = Vec::new();
    match cmd {
        Command::PseudoDepth { manifest, .. } | Command::Evaluate { manifest, .. } => {
            files.push((manifest, "manifest"))
        }
        Command::Pretrain { manifest, .. } => files.extend(manifest.iter().map(|m| (m.as_path(), "manifest"))),
        Command::TrainDepth {
            manifest,
            pretrain_manifest,
            fine_tune_from,
            ..
        } => {
            files.push((manifest, "manifest"));
            files.extend(pretrain_manifest.iter().map(|m| (m.as_path(), "manifest")));
            files.extend(fine_tune_from.as_deref().map(|p| (p, "checkpoint")));
        }
        Command::TrainSeg {
            manifest,
            depth_checkpoint,
            fine_tune_from,
            ..
        } => {
            files.push((manifest, "manifest"));
            files.extend(depth_checkpoint.as_deref().map(|p| (p, "checkpoint")));
            files.extend(fine_tune_from.as_deref().map(|p| (p, "checkpoint")));
        }
        Command::InferDepth { checkpoint, manifest, .. } => {
            files.push((manifest, "manifest"));
            files.push((checkpoint, "checkpoint"));
        }
        Command::InferSeg {
            checkpoint,
            manifest,
            depth_checkpoint,
            ..
        } => {
            files.push((manifest, "manifest"));
            files.push((checkpoint, "checkpoint"));
            files.extend(depth_checkpoint.as_deref().map(|p| (p, "checkpoint")));
        }
        Command::CrfRefine { prob, image, depth, .. } => {
            files.push((prob, "probability map"));
            files.push((image, "image"));
            files.extend(depth.as_deref().map(|p| (p, "depth map")));
        }
        Command::RocPlot { roc, label, .. } => {
            files.extend(roc.iter().map(|p| (p.as_path(), "ROC file")));
            if !label.is_empty() && label.len() != roc.len() {
                return Err(UsageError(format!("{} labels for {} ROC files", label.len(), roc.len())).into());
            }
        }
    }
    for (p, what) in files {
        require_file(p, what)?;
    }
    if let Command::Evaluate {
        depth_pred, seg_pred, ..
    } = cmd
    {
        if depth_pred.is_none() && seg_pred.is_none() {
            return Err(UsageError("evaluate needs --depth-pred and/or --seg-pred".into()).into());
        }
        for d in [depth_pred, seg_pred].into_iter().flatten() {
            if !d.is_dir() {
                return Err(UsageError(format!("prediction directory {} does not exist", d.display())).into());
            }
        }
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn samples(manifest: &Manifest, cfg: &RunConfig) -> anyhow::Result<Vec<LoadedSample>> {
    Ok(load_all(manifest, cfg.resolution())?)
}

/// `row` with every path made absolute against the manifest's directory.
fn absolute_row(manifest: &Manifest, row: &ManifestRow) -> anyhow::Result<ManifestRow> {
    let abs = |p: &Option<PathBuf>| -> anyhow::Result<Option<PathBuf>> {
        p.as_ref().map(|p| absolute(&manifest.resolve(p))).transpose()
    };
    Ok(ManifestRow {
        image: absolute(&manifest.resolve(&row.image))?,
        depth: abs(&row.depth)?,
        label: abs(&row.label)?,
        guide: abs(&row.guide)?,
        ..row.clone()
    })
}

fn subset(samples: &[LoadedSample], ids: &[&str]) -> Vec<LoadedSample> {
    samples.iter().filter(|s| ids.contains(&s.id.as_str())).cloned().collect()
}

fn write_guide_manifest(
    out: &mut Outputs,
    manifest: &Manifest,
    dir: &str,
    name: &str,
) -> anyhow::Result<()> {
    let root = absolute(out.root())?;
    let mut rows = Vec::with_capacity(manifest.rows.len());
    for row in &manifest.rows {
        let mut r = absolute_row(manifest, row)?;
        r.guide = Some(root.join(dir).join(format!("{}.png", row.id)));
        rows.push(r);
    }
    let path = out.file(name)?;
    Manifest { root, rows }.save(&path)?;
    Ok(())
}

pub fn pseudo_depth(manifest: &Path, cfg: &RunConfig, out: &mut Outputs) -> anyhow::Result<()> {
    let m = open_manifest(manifest)?;
    for row in &m.rows {
        let s = load_sample(&m, row, cfg.resolution())?;
        let pd = make_pseudo_depth(&s.image).with_context(|| format!("pseudo-depth of {}", s.id))?;
        save_depth_png16(&pd.values, &out.file(format!("pseudo_depth/{}.png", s.id))?)?;
        save_mask_png(&pd.vessel_mask, &out.file(format!("vessels/{}.png", s.id))?)?;
    }
    write_guide_manifest(out, &m, "pseudo_depth", "manifest.csv")
}

fn pool(manifests: &[PathBuf], cfg: &RunConfig) -> anyhow::Result<Vec<LoadedSample>> {
    let mut all = Vec::new();
    for p in manifests {
        all.extend(samples(&open_manifest(p)?, cfg)?);
    }
    Ok(all)
}

pub fn pretrain(manifests: &[PathBuf], cfg: &RunConfig, out: &mut Outputs) -> anyhow::Result<()> {
    if cfg.pretrain.task == PretrainKind::None {
        return Err(UsageError("pretrain needs --task pseudo_depth or --task denoising".into()).into());
    }
    let all = pool(manifests, cfg)?;
    pipeline::run_pretrain(out.root(), cfg, cfg.pretrain.task, &all)?;
    out.record_dir(".", &STAGE_FILES);
    Ok(())
}

pub struct TrainDepthArgs<'a> {
    pub manifest: &'a Path,
    pub pretrain_manifest: &'a [PathBuf],
    pub folds: Option<usize>,
    pub fold: Option<usize>,
    pub fine_tune_from: Option<&'a Path>,
}

fn record_depth_run(out: &mut Outputs, dir: &str, pretrained: bool) {
    out.record_dir(dir, &STAGE_FILES);
    if pretrained {
        out.record_dir(&format!("{dir}/pretrain"), &STAGE_FILES);
    }
}

pub fn train_depth(a: TrainDepthArgs<'_>, cfg: &RunConfig, name: &str, out: &mut Outputs) -> anyhow::Result<()> {
    let m = open_manifest(a.manifest)?;
    let all = samples(&m, cfg)?;
    let extra = pool(a.pretrain_manifest, cfg)?;
    let pretrained = cfg.pretrain.task != PretrainKind::None;
    let Some(folds) = a.folds else {
        pipeline::run_depth(out.root(), cfg, &all, cfg.pretrain.task, &extra, a.fine_tune_from)?;
        record_depth_run(out, ".", pretrained);
        return Ok(());
    };
    let spec = make_splits(&m.ids(), SplitMode::KFold { folds }, cfg.seed)?;
    let chosen: Vec<usize> = match a.fold {
        Some(k) if k >= folds => return Err(UsageError(format!("fold {k} out of range for {folds} folds")).into()),
        Some(k) => vec![k],
        None => (0..folds).collect(),
    };
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for k in chosen {
        let (train_ids, test_ids) = spec.train_test(k);
        let dir = format!("fold{k}");
        info!("fold {k}: {} train / {} test", train_ids.len(), test_ids.len());
        let pool_k = if extra.is_empty() { subset(&all, &train_ids) } else { extra.clone() };
        let run = pipeline::run_depth(
            &out.root().join(&dir),
            cfg,
            &subset(&all, &train_ids),
            cfg.pretrain.task,
            &pool_k,
            a.fine_tune_from,
        )?;
        record_depth_run(out, &dir, pretrained);
        for s in subset(&all, &test_ids) {
            let (rmse, corr) = pipeline::score_depth(&run.checkpoint, &s)?;
            rows.push(FoldRow {
                fold: k,
                id: s.id.clone(),
                rmse,
                corr,
            });
            reports.push(MetricsReport {
                id: s.id.clone(),
                rmse: Some(rmse),
                corr: Some(corr),
                glaucoma_gt: s.glaucoma,
                ..MetricsReport::default()
            });
        }
    }
    report::write_fold_csv(&out.file("cv_metrics.csv")?, &rows)?;
    let agg = aggregate(&reports, cfg.eval.tau);
    report::write_json(&out.file("metrics.json")?, &agg)?;
    fs::write(out.file("table.md")?, report::depth_table(&[(name.to_string(), &agg)]))?;
    Ok(())
}

pub struct TrainSegArgs<'a> {
    pub manifest: &'a Path,
    pub depth_checkpoint: Option<&'a Path>,
    pub split: SplitArg,
    pub fine_tune_from: Option<&'a Path>,
}

pub fn train_seg(a: TrainSegArgs<'_>, cfg: &RunConfig, out: &mut Outputs) -> anyhow::Result<()> {
    let m = open_manifest(a.manifest)?;
    let all = samples(&m, cfg)?;
    let depth_ckpt = a.depth_checkpoint.map(load_checkpoint).transpose()?;
    let train = match a.split {
        SplitArg::None => all,
        SplitArg::Half => {
            let spec = make_splits(&m.ids(), SplitMode::TrainTestHalf, cfg.seed)?;
            let (train_ids, test_ids) = spec.train_test(0);
            let split = SplitFile {
                seed: cfg.seed,
                train: train_ids.iter().map(|s| s.to_string()).collect(),
                test: test_ids.iter().map(|s| s.to_string()).collect(),
            };
            report::write_json(&out.file("split.json")?, &split)?;
            let test_rows = m
                .rows
                .iter()
                .filter(|r| test_ids.contains(&r.id.as_str()))
                .map(|r| absolute_row(&m, r))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let root = absolute(out.root())?;
            Manifest { root, rows: test_rows }.save(&out.file("test_manifest.csv")?)?;
            subset(&all, &train_ids)
        }
    };
    pipeline::run_seg(out.root(), cfg, &train, cfg.seg.guide, depth_ckpt.as_ref(), a.fine_tune_from)?;
    out.record_dir(".", &STAGE_FILES);
    Ok(())
}

pub fn infer_depth(checkpoint: &Path, manifest: &Path, out: &mut Outputs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let m = open_manifest(manifest)?;
    let res = ckpt.model.net().input_resolution;
    for row in &m.rows {
        let s = load_sample(&m, row, res)?;
        let d = pipeline::predict_depth(&ckpt, &s)?;
        save_depth_png16(&d, &out.file(format!("depth/{}.png", s.id))?)?;
    }
    write_guide_manifest(out, &m, "depth", "manifest.csv")
}

pub struct InferSegArgs<'a> {
    pub checkpoint: &'a Path,
    pub manifest: &'a Path,
    pub guide: Option<GuideSource>,
    pub depth_checkpoint: Option<&'a Path>,
    pub crf: bool,
}

pub fn infer_seg(a: InferSegArgs<'_>, cfg: &RunConfig, out: &mut Outputs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(a.checkpoint)?;
    let depth_ckpt = a.depth_checkpoint.map(load_checkpoint).transpose()?;
    let m = open_manifest(a.manifest)?;
    let guide = a.guide.unwrap_or_else(|| pipeline::checkpoint_guide(&ckpt));
    if (guide != GuideSource::None) != ckpt.model.is_guided() {
        bail!("guide {} does not match the checkpoint's network", guide.as_str());
    }
    let res = ckpt.model.net().input_resolution;
    let all = load_all(&m, res)?;
    let guides = pipeline::guide_maps(guide, &all, depth_ckpt.as_ref())?;
    for (s, g) in all.iter().zip(&guides) {
        let prob = pipeline::predict_seg(&ckpt, s, g.as_ref())?;
        save_probabilities(&prob, &out.file(format!("prob/{}.npy", s.id))?)?;
        save_labels_png(&prob.argmax(), &out.file(format!("labels/{}.png", s.id))?)?;
        if a.crf {
            let (q, labels) = refine(&prob, &s.image, g.as_ref(), &cfg.crf)?;
            save_probabilities(&q, &out.file(format!("crf_prob/{}.npy", s.id))?)?;
            save_labels_png(&labels, &out.file(format!("crf_labels/{}.png", s.id))?)?;
        }
    }
    Ok(())
}

pub fn crf_refine(
    prob: &Path,
    image: &Path,
    depth: Option<&Path>,
    cfg: &RunConfig,
    out: &mut Outputs,
) -> anyhow::Result<()> {
    let p = load_probabilities(prob)?;
    let mut img = load_rgb(image, "image")?;
    if (img.height(), img.width()) != (p.height(), p.width()) {
        img = resize_image(&img, p.height(), p.width());
    }
    let d = depth.map(|d| load_depth(d, None)).transpose()?;
    if let Some(d) = &d {
        if d.dims() != (p.height(), p.width()) {
            bail!("depth map is {:?}, probability map is {}x{}", d.dims(), p.height(), p.width());
        }
    }
    let (q, labels) = refine(&p, &img, d.as_ref(), &cfg.crf)?;
    save_labels_png(&labels, &out.file("labels.png")?)?;
    save_probabilities(&q, &out.file("q.npy")?)?;
    Ok(())
}

pub struct EvaluateArgs<'a> {
    pub manifest: &'a Path,
    pub depth_pred: Option<&'a Path>,
    pub seg_pred: Option<&'a Path>,
    pub name: &'a str,
}

pub fn evaluate(a: EvaluateArgs<'_>, cfg: &RunConfig, out: &mut Outputs) -> anyhow::Result<()> {
    let m = open_manifest(a.manifest)?;
    let tau = cfg.eval.tau;
    let mut rows = Vec::with_capacity(m.rows.len());
    for row in &m.rows {
        let mut r = MetricsReport {
            id: row.id.clone(),
            glaucoma_gt: row.glaucoma,
            ..MetricsReport::default()
        };
        if let Some(dir) = a.depth_pred {
            let pred = load_depth(&dir.join(format!("{}.png", row.id)), None)
                .with_context(|| format!("depth prediction of {}", row.id))?;
            let s = load_sample(&m, row, pred.height())?;
            let gt = s.depth.with_context(|| format!("row {} has no depth map", row.id))?;
            let (rmse, corr) = depth_metrics(&pred, &gt)?;
            r.rmse = Some(rmse);
            r.corr = Some(corr);
        }
        if let Some(dir) = a.seg_pred {
            let prob = load_probabilities(&dir.join(format!("{}.npy", row.id)))
                .with_context(|| format!("probability map of {}", row.id))?;
            let s = load_sample(&m, row, prob.height())?;
            let gt = s.labels.with_context(|| format!("row {} has no label map", row.id))?;
            r = r.with_segmentation(&score_segmentation(&prob, &gt, tau)?);
        }
        rows.push(r);
    }
    report::write_metrics_csv(&out.file("metrics.csv")?, &rows)?;
    let agg = aggregate(&rows, tau);
    report::write_json(&out.file("metrics.json")?, &agg)?;
    let (scores, labels): (Vec<f64>, Vec<bool>) =
        rows.iter().filter_map(|r| Some((r.cdr_output?, r.glaucoma_gt?))).unzip();
    match roc_curve(&scores, &labels) {
        Ok(points) => {
            report::write_roc_csv(&out.file("roc.csv")?, &points)?;
            render_roc_plot(&[(a.name.to_string(), points)], &out.file("roc.png")?)?;
        }
        Err(e) => info!("no ROC curve: {e}"),
    }
    fs::write(out.file("table.md")?, report::tables(a.name, &agg))?;
    Ok(())
}

pub fn roc_plot(files: &[PathBuf], labels: &[String], out: &mut Outputs) -> anyhow::Result<()> {
    let mut curves = Vec::with_capacity(files.len());
    for (i, f) in files.iter().enumerate() {
        let name = labels.get(i).cloned().unwrap_or_else(|| {
            f.parent()
                .and_then(|p| p.file_name())
                .map_or_else(|| format!("curve{i}"), |n| n.to_string_lossy().into_owned())
        });
        curves.push((name, report::read_roc_csv(f)?));
    }
    render_roc_plot(&curves, &out.file("roc.png")?)?;
    Ok(())
}
