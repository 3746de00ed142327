//! Run configuration: built-in defaults, overlaid by a TOML file, overlaid
//! by command-line flags. Every run freezes the resolved result.

use std::path::Path;

use anyhow::{bail, Context};
use clap::ValueEnum;
use onh_core::crf::CrfParams;
use onh_core::data_pipeline::AugmentPolicy;
use onh_core::networks::{GuidedConfig, ModelConfig, NetworkConfig, OutputActivation};
use onh_core::raster::NUM_CLASSES;
use onh_core::training::{
    LossKind, PretrainTask, TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_NOISE_SIGMA, DEPTH_EPOCHS, PRETRAIN_EPOCHS,
    SEG_EPOCHS,
};
use serde::{Deserialize, Serialize};

/// Map fed to the guide branch of the segmentation network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum GuideSource {
    None,
    /// Depth predicted by a depth checkpoint, or the manifest's guide column.
    Depth,
    PseudoDepth,
}

impl GuideSource {
    pub fn as_str(self) -> &'static str {
        match self {
            GuideSource::None => "none",
            GuideSource::Depth => "depth",
            GuideSource::PseudoDepth => "pseudo_depth",
        }
    }

    pub fn parse(s: &str) -> Option<GuideSource> {
        <GuideSource as ValueEnum>::from_str(s, false).ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum PretrainKind {
    None,
    PseudoDepth,
    Denoising,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub multiplier: usize,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub zoom_range: (f64, f64),
    pub noise_sigma_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let p = AugmentPolicy::default();
        AugmentConfig {
            multiplier: p.multiplier,
            flip_horizontal: p.flip_horizontal,
            flip_vertical: p.flip_vertical,
            zoom_range: p.zoom_range,
            noise_sigma_max: p.noise_sigma_max,
        }
    }
}

impl AugmentConfig {
    pub fn policy(&self, seed: u64) -> AugmentPolicy {
        AugmentPolicy {
            multiplier: self.multiplier,
            flip_horizontal: self.flip_horizontal,
            flip_vertical: self.flip_vertical,
            zoom_range: self.zoom_range,
            noise_sigma_max: self.noise_sigma_max,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Id of the canonical image; the first training id when absent.
    pub canonical_id: Option<String>,
    /// Share of the training ids held out for early stopping.
    pub validation_fraction: f64,
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            canonical_id: None,
            validation_fraction: 0.1,
            augment: AugmentConfig::default(),
        }
    }
}

/// Optimization budget of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub max_steps: Option<u64>,
}

impl StageConfig {
    fn with_epochs(epochs: usize) -> Self {
        let t = TrainConfig::default();
        StageConfig {
            batch_size: DEFAULT_BATCH_SIZE,
            epochs,
            learning_rate: t.learning_rate,
            patience: t.patience,
            max_steps: None,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            seed,
            patience: self.patience,
            max_steps: self.max_steps,
            fine_tune_from: None,
        }
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig::with_epochs(DEPTH_EPOCHS)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub task: PretrainKind,
    pub noise_sigma: f64,
    pub train: StageConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            task: PretrainKind::None,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            train: StageConfig::with_epochs(PRETRAIN_EPOCHS),
        }
    }
}

impl PretrainConfig {
    pub fn task(&self, kind: PretrainKind) -> Option<PretrainTask> {
        match kind {
            PretrainKind::None => None,
            PretrainKind::PseudoDepth => Some(PretrainTask::PseudoDepth),
            PretrainKind::Denoising => Some(PretrainTask::Denoising {
                noise_sigma: self.noise_sigma,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthConfig {
    pub loss: LossKind,
    pub train: StageConfig,
}

impl Default for DepthConfig {
    fn default() -> Self {
        DepthConfig {
            loss: LossKind::L2,
            train: StageConfig::with_epochs(DEPTH_EPOCHS),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub guide: GuideSource,
    pub train: StageConfig,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            guide: GuideSource::Depth,
            train: StageConfig::with_epochs(SEG_EPOCHS),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Probability threshold of the disc and cup masks.
    pub tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tau: onh_core::evaluation::DEFAULT_TAU,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    /// Shared trunk; the output head is set per task.
    pub network: NetworkConfig,
    pub guide: GuidedConfig,
    pub pretrain: PretrainConfig,
    pub depth: DepthConfig,
    pub seg: SegConfig,
    pub crf: CrfParams,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            network: NetworkConfig::depth(),
            guide: GuidedConfig::default(),
            pretrain: PretrainConfig::default(),
            depth: DepthConfig::default(),
            seg: SegConfig::default(),
            crf: CrfParams::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid by `file` when given.
    pub fn load(file: Option<&Path>) -> anyhow::Result<RunConfig> {
        match file {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn resolution(&self) -> usize {
        self.network.input_resolution
    }

    pub fn depth_model(&self) -> ModelConfig {
        ModelConfig::Depth {
            net: NetworkConfig {
                in_channels: 3,
                out_channels: 1,
                output_activation: OutputActivation::Tanh,
                ..self.network.clone()
            },
        }
    }

    /// Depth trunk reconstructing the three image channels.
    pub fn denoising_model(&self) -> ModelConfig {
        ModelConfig::Depth {
            net: NetworkConfig {
                in_channels: 3,
                out_channels: 3,
                output_activation: OutputActivation::Tanh,
                ..self.network.clone()
            },
        }
    }

    pub fn seg_model(&self, guide: GuideSource) -> ModelConfig {
        ModelConfig::Segmentation {
            net: NetworkConfig {
                in_channels: 3,
                out_channels: NUM_CLASSES,
                output_activation: OutputActivation::Softmax,
                ..self.network.clone()
            },
            guide: (guide != GuideSource::None).then(|| self.guide.clone()),
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        for m in [self.depth_model(), self.seg_model(GuideSource::Depth)] {
            m.net().validate()?;
            if let Some(g) = m.guide() {
                g.validate(m.net())?;
            }
        }
        for s in [&self.pretrain.train, &self.depth.train, &self.seg.train] {
            s.train_config(self.seed).validate()?;
        }
        if self.depth.loss == LossKind::MulticlassCe {
            bail!("depth loss must be one of l2, l1, berhu");
        }
        if let Some(t) = self.pretrain.task(PretrainKind::Denoising) {
            t.objective()?;
        }
        self.crf.validate()?;
        let f = self.data.validation_fraction;
        if !(0.0..1.0).contains(&f) {
            bail!("validation_fraction must lie in [0, 1), got {f}");
        }
        let a = &self.data.augment;
        if a.multiplier < 1 || !(a.zoom_range.0 > 0.0 && a.zoom_range.0 <= a.zoom_range.1) || a.noise_sigma_max < 0.0 {
            bail!("invalid augmentation settings {a:?}");
        }
        if !(self.eval.tau > 0.0 && self.eval.tau < 1.0) {
            bail!("tau must lie in (0, 1), got {}", self.eval.tau);
        }
        Ok(())
    }
}
