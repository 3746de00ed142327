//! Command-line surface. Flags overlay the config file, which overlays the
//! built-in defaults.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use onh_core::nn_core::BlockKind;
use onh_core::training::LossKind;

use crate::config::{GuideSource, PretrainKind, RunConfig, StageConfig};

#[derive(Parser, Debug)]
#[command(name = "onh", version, about = "Fundus depth estimation and optic disc/cup segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pseudo-depth and vessel masks for every manifest row.
    PseudoDepth {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Self-supervised pretraining of the depth network.
    Pretrain {
        #[arg(long, required = true, num_args = 1..)]
        manifest: Vec<PathBuf>,
        #[arg(long, value_enum)]
        task: Option<PretrainKind>,
        #[arg(long)]
        noise_sigma: Option<f64>,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Depth training, optionally after pretraining and with k-fold cross-validation.
    TrainDepth {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        #[arg(long, value_enum)]
        block: Option<BlockArg>,
        #[arg(long, value_enum)]
        pretrain: Option<PretrainKind>,
        /// Extra unlabeled manifests used only for pretraining.
        #[arg(long, num_args = 1..)]
        pretrain_manifest: Vec<PathBuf>,
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        #[arg(long)]
        pretrain_max_steps: Option<u64>,
        /// Run k-fold cross-validation instead of one training run.
        #[arg(long)]
        folds: Option<usize>,
        /// Train only this fold of the cross-validation.
        #[arg(long, requires = "folds")]
        fold: Option<usize>,
        #[arg(long)]
        fine_tune_from: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Segmentation training.
    TrainSeg {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        block: Option<BlockArg>,
        #[arg(long, value_enum)]
        guide: Option<GuideSource>,
        /// Depth checkpoint producing the guide maps.
        #[arg(long)]
        depth_checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "none")]
        split: SplitArg,
        #[arg(long)]
        fine_tune_from: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Depth maps for every manifest row.
    InferDepth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Disc/cup probabilities and labels for every manifest row.
    InferSeg {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Guide source; defaults to the one the checkpoint was trained with.
        #[arg(long, value_enum)]
        guide: Option<GuideSource>,
        #[arg(long)]
        depth_checkpoint: Option<PathBuf>,
        #[command(flatten)]
        crf: CrfArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Dense CRF refinement of one probability map.
    CrfRefine {
        #[arg(long)]
        prob: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// 16-bit depth PNG; enables the depth kernel.
        #[arg(long)]
        depth: Option<PathBuf>,
        #[command(flatten)]
        crf: CrfArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Metrics of prediction directories against a ground-truth manifest.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of `<id>.png` 16-bit depth predictions.
        #[arg(long)]
        depth_pred: Option<PathBuf>,
        /// Directory of `<id>.npy` probability maps.
        #[arg(long)]
        seg_pred: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        /// Row label used in the tables.
        #[arg(long, default_value = "model")]
        name: String,
        #[command(flatten)]
        common: Common,
    },
    /// Overlays ROC curves from `roc.csv` files.
    RocPlot {
        #[arg(long, required = true, num_args = 1..)]
        roc: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        label: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Validate the configuration and print it without touching anything.
    #[arg(long)]
    pub dry_run: bool,
    /// Network input side in pixels.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Width of the first encoder level.
    #[arg(long)]
    pub base_filters: Option<usize>,
    #[arg(long)]
    pub encoder_levels: Option<usize>,
}

/// Budget of the subcommand's main training stage.
#[derive(Args, Debug, Clone, Default)]
pub struct StageArgs {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CrfArgs {
    /// Refine the network output with the dense CRF.
    #[arg(long)]
    pub crf: bool,
    #[arg(long)]
    pub w1: Option<f64>,
    #[arg(long)]
    pub w2: Option<f64>,
    #[arg(long)]
    pub w3: Option<f64>,
    #[arg(long)]
    pub theta_alpha: Option<f64>,
    #[arg(long)]
    pub theta_beta: Option<f64>,
    #[arg(long)]
    pub theta_gamma: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    L2,
    L1,
    Berhu,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::L2 => LossKind::L2,
            LossArg::L1 => LossKind::L1,
            LossArg::Berhu => LossKind::Berhu,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BlockArg {
    Residual,
    Dri,
}

impl From<BlockArg> for BlockKind {
    fn from(b: BlockArg) -> Self {
        match b {
            BlockArg::Residual => BlockKind::Residual,
            BlockArg::Dri => BlockKind::Dri,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    /// Train on every row.
    None,
    /// Seeded half split; train on one half and report the other.
    Half,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl Common {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.network.input_resolution, self.resolution);
        set(&mut cfg.network.base_filters, self.base_filters);
        set(&mut cfg.network.encoder_levels, self.encoder_levels);
    }
}

impl StageArgs {
    pub fn apply(&self, stage: &mut StageConfig) {
        set(&mut stage.batch_size, self.batch_size);
        set(&mut stage.epochs, self.epochs);
        set(&mut stage.learning_rate, self.lr);
        set(&mut stage.patience, self.patience);
        if self.max_steps.is_some() {
            stage.max_steps = self.max_steps;
        }
    }
}

impl CrfArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let c = &mut cfg.crf;
        set(&mut c.w1, self.w1);
        set(&mut c.w2, self.w2);
        set(&mut c.w3, self.w3);
        set(&mut c.theta_alpha, self.theta_alpha);
        set(&mut c.theta_beta, self.theta_beta);
        set(&mut c.theta_gamma, self.theta_gamma);
        set(&mut c.iterations, self.iters);
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::PseudoDepth { .. } => "pseudo-depth",
            Command::Pretrain { .. } => "pretrain",
            Command::TrainDepth { .. } => "train-depth",
            Command::TrainSeg { .. } => "train-seg",
            Command::InferDepth { .. } => "infer-depth",
            Command::InferSeg { .. } => "infer-seg",
            Command::CrfRefine { .. } => "crf-refine",
            Command::Evaluate { .. } => "evaluate",
            Command::RocPlot { .. } => "roc-plot",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::PseudoDepth { common, .. }
            | Command::Pretrain { common, .. }
            | Command::TrainDepth { common, .. }
            | Command::TrainSeg { common, .. }
            | Command::InferDepth { common, .. }
            | Command::InferSeg { common, .. }
            | Command::CrfRefine { common, .. }
            | Command::Evaluate { common, .. }
            | Command::RocPlot { common, .. } => common,
        }
    }

    /// Resolved configuration: defaults, then the config file, then flags.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let common = self.common();
        let mut cfg = RunConfig::load(common.config.as_deref())?;
        common.apply(&mut cfg);
        match self {
            Command::Pretrain {
                task, noise_sigma, stage, ..
            } => {
                set(&mut cfg.pretrain.task, *task);
                set(&mut cfg.pretrain.noise_sigma, *noise_sigma);
                stage.apply(&mut cfg.pretrain.train);
            }
            Command::TrainDepth {
                loss,
                block,
                pretrain,
                pretrain_epochs,
                pretrain_max_steps,
                stage,
                ..
            } => {
                set(&mut cfg.depth.loss, loss.map(Into::into));
                set(&mut cfg.network.block_kind, block.map(Into::into));
                set(&mut cfg.pretrain.task, *pretrain);
                set(&mut cfg.pretrain.train.epochs, *pretrain_epochs);
                if pretrain_max_steps.is_some() {
                    cfg.pretrain.train.max_steps = *pretrain_max_steps;
                }
                stage.apply(&mut cfg.depth.train);
            }
            Command::TrainSeg { block, guide, stage, .. } => {
                set(&mut cfg.network.block_kind, block.map(Into::into));
                set(&mut cfg.seg.guide, *guide);
                stage.apply(&mut cfg.seg.train);
            }
            Command::InferSeg { crf, .. } | Command::CrfRefine { crf, .. } => crf.apply(&mut cfg),
            Command::Evaluate { tau, .. } => set(&mut cfg.eval.tau, *tau),
            _ => {}
        }
        Ok(cfg)
    }
}
