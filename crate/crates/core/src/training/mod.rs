//! Losses, pretraining proxies and the optimization loop.

mod checkpoint;
pub mod losses;
mod optim;

pub use checkpoint::{fine_tune_init, warm_start, Checkpoint, FORMAT_VERSION};
pub use losses::{berhu_threshold, loss_berhu, loss_l1, loss_l2, loss_multiclass_ce, LossKind, BERHU_FRACTION};
pub use optim::{Adam, AdamConfig};

use std::path::{Path, PathBuf};

use onh_tensor::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_pipeline::{Sample, Target};
use crate::networks::{Arch, Model};
use crate::nn_core::{Mode, Params, Session};
use crate::{CoreError, Result};

pub const DEFAULT_BATCH_SIZE: usize = 10;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;
pub const PRETRAIN_EPOCHS: usize = 50;
pub const DEPTH_EPOCHS: usize = 200;
pub const SEG_EPOCHS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<u64>,
    /// Checkpoint of the same architecture to start from, see [`fine_tune_init`].
    pub fine_tune_from: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEPTH_EPOCHS,
            learning_rate: AdamConfig::default().learning_rate,
            seed: 0,
            patience: 20,
            max_steps: None,
            fine_tune_from: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(CoreError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(CoreError::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum PretrainTask {
    /// Reconstruct the clean image from `image + N(0, σ²)`.
    Denoising { noise_sigma: f64 },
    /// Reconstruct the pseudo-depth map from the image.
    PseudoDepth,
}

impl PretrainTask {
    pub fn objective(self) -> Result<Objective> {
        match self {
            PretrainTask::Denoising { noise_sigma } if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) => {
                Err(CoreError::Config(format!("invalid denoising sigma {noise_sigma}")))
            }
            PretrainTask::Denoising { noise_sigma } => Ok(Objective::Denoising { noise_sigma }),
            PretrainTask::PseudoDepth => Ok(Objective::Regression { loss: LossKind::L2 }),
        }
    }
}

/// What a model is trained to minimize.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "objective", rename_all = "snake_case")]
pub enum Objective {
    /// Regress a `[0, 1]` map from the tanh head.
    Regression { loss: LossKind },
    /// L2 reconstruction of the clean input from a noisy copy.
    Denoising { noise_sigma: f64 },
    /// Mean cross-entropy of the softmax head.
    Segmentation,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExampleTarget {
    /// `[1, C, H, W]` map in `[0, 1]`.
    Map(Tensor),
    /// Class index per pixel, row-major.
    Labels(Vec<usize>),
}

/// One training pair in tensor form.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: Tensor,
    pub target: ExampleTarget,
    pub guide: Option<Tensor>,
}

impl Example {
    pub fn from_sample(s: &Sample) -> Example {
        Example {
            image: s.image.to_tensor(),
            target: match &s.target {
                Target::Depth(d) => ExampleTarget::Map(d.to_tensor()),
                Target::Labels(l) => ExampleTarget::Labels(l.data().iter().map(|&v| v as usize).collect()),
            },
            guide: s.guide.as_ref().map(|g| g.to_tensor()),
        }
    }

    /// Self-reconstruction pair for denoising pretraining.
    pub fn reconstruction(image: Tensor) -> Example {
        Example {
            target: ExampleTarget::Map(image.clone()),
            image,
            guide: None,
        }
    }
}

/// Resumable position in the training schedule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    /// Next batch index within `epoch`.
    pub batch: usize,
    pub step: u64,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stale_epochs: usize,
    pub finished: bool,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    /// Cross-entropy summed over the batch's pixels; `loss` is the mean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_sum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: usize,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub losses: Vec<f64>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample order of `epoch`, a pure function of the seed.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn stack(items: &[&Tensor]) -> Result<Tensor> {
    Ok(Tensor::stack(items)?)
}

fn add_noise(t: &Tensor, sigma: f64, seed: u64, stream: u64) -> Tensor {
    if sigma == 0.0 {
        return t.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    let mut out = t.clone();
    out.data_mut().iter_mut().for_each(|v| *v += n.sample(&mut rng));
    out
}

/// Builds the scalar loss of a batch on the session tape.
fn batch_loss(
    model: &Model,
    objective: Objective,
    s: &mut Session<'_>,
    batch: &[&Example],
    noise_seed: Option<(u64, u64)>,
) -> Result<Var> {
    let images: Vec<&Tensor> = batch.iter().map(|e| &e.image).collect();
    let mut input = stack(&images)?;
    if let (Objective::Denoising { noise_sigma }, Some((seed, stream))) = (objective, noise_seed) {
        input = add_noise(&input, noise_sigma, seed, stream);
    }
    let x = s.input(input);
    let guide = if model.is_guided() {
        let gs = batch
            .iter()
            .map(|e| e.guide.as_ref().ok_or(CoreError::Config("guided model needs guide maps".into())))
            .collect::<Result<Vec<_>>>()?;
        Some(s.input(stack(&gs)?))
    } else {
        None
    };
    let y = model.forward(s, x, guide)?;
    match objective {
        Objective::Segmentation => {
            let mut labels = Vec::new();
            for e in batch {
                match &e.target {
                    ExampleTarget::Labels(l) => labels.extend_from_slice(l),
                    ExampleTarget::Map(_) => return Err(CoreError::Config("segmentation needs label targets".into())),
                }
            }
            Ok(s.graph.cross_entropy_logits(y, &labels)?)
        }
        Objective::Regression { .. } | Objective::Denoising { .. } => {
            let maps = batch
                .iter()
                .map(|e| match &e.target {
                    ExampleTarget::Map(m) => Ok(m),
                    ExampleTarget::Labels(_) => Err(CoreError::Config("regression needs map targets".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            let target = stack(&maps)?;
            let pred = s.graph.affine(y, 0.5, 0.5);
            let loss = match objective {
                Objective::Regression { loss } => loss,
                _ => LossKind::L2,
            };
            Ok(match loss {
                LossKind::L2 => s.graph.l2_loss(pred, &target)?,
                LossKind::L1 => s.graph.l1_loss(pred, &target)?,
                LossKind::Berhu => s.graph.berhu_loss(pred, &target, BERHU_FRACTION)?,
                LossKind::MulticlassCe => {
                    return Err(CoreError::Config("cross-entropy needs a segmentation objective".into()))
                }
            })
        }
    }
}

/// Validation score (lower is better): pixel RMSE for map targets, mean
/// cross-entropy for labels. Denoising inputs are corrupted with a fixed seed.
pub fn validation_score(model: &Model, objective: Objective, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(CoreError::Empty("validation set"));
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    for (i, e) in data.iter().enumerate() {
        let mut image = e.image.clone();
        if let Objective::Denoising { noise_sigma } = objective {
            image = add_noise(&image, noise_sigma, u64::MAX, i as u64);
        }
        match (&e.target, objective) {
            (ExampleTarget::Labels(l), Objective::Segmentation) => {
                let p = model.predict_probabilities(&image, e.guide.as_ref())?;
                let plane = p.shape().plane();
                for (j, &lab) in l.iter().enumerate() {
                    sq -= p.data()[lab * plane + j].max(f64::MIN_POSITIVE).ln();
                }
                count += l.len();
            }
            (ExampleTarget::Map(t), Objective::Regression { .. } | Objective::Denoising { .. }) => {
                let p = model.predict_depth(&image)?;
                if p.shape() != t.shape() {
                    return Err(CoreError::Shape(format!("prediction {} vs target {}", p.shape(), t.shape())));
                }
                sq += p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                count += t.len();
            }
            _ => return Err(CoreError::Config("target kind does not match the objective".into())),
        }
    }
    Ok(match objective {
        Objective::Segmentation => sq / count as f64,
        _ => (sq / count as f64).sqrt(),
    })
}

/// Where and how often to write checkpoints and log records.
#[derive(Default)]
pub struct RunHooks<'a> {
    pub checkpoint_dir: Option<&'a Path>,
    pub on_record: Option<&'a mut dyn FnMut(&LogRecord) -> Result<()>>,
    /// Template for every checkpoint written (canonical stats, depth scaling).
    pub template: Option<Checkpoint>,
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub config: TrainConfig,
    pub objective: Objective,
    pub state: TrainState,
    best_params: Option<Params>,
    last_batch_pixels: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, objective: Objective) -> Result<Self> {
        config.validate()?;
        let arch_ok = matches!(
            (&model.arch, objective),
            (Arch::Depth(_), Objective::Regression { .. } | Objective::Denoising { .. })
                | (Arch::Segmentation(_), Objective::Segmentation)
        );
        if !arch_ok {
            return Err(CoreError::Config(format!("objective {objective:?} does not fit the model head")));
        }
        let optimizer = Adam::new(
            AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            },
            &model.params,
        );
        Ok(Trainer {
            model,
            optimizer,
            config,
            objective,
            state: TrainState::default(),
            best_params: None,
            last_batch_pixels: 0,
        })
    }

    /// Continues exactly where a checkpoint with optimizer state left off.
    pub fn resume(ckpt: Checkpoint, objective: Objective) -> Result<Self> {
        let config = ckpt
            .train_config
            .clone()
            .ok_or_else(|| CoreError::Checkpoint("no training configuration stored".into()))?;
        let optimizer = ckpt
            .optimizer
            .clone()
            .ok_or_else(|| CoreError::Checkpoint("no optimizer state stored".into()))?;
        let mut t = Trainer::new(ckpt.model, config, objective)?;
        t.optimizer = optimizer;
        t.state = ckpt.state.unwrap_or_default();
        Ok(t)
    }

    /// Snapshot including optimizer and schedule state.
    pub fn checkpoint(&self, template: Option<&Checkpoint>) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            state: Some(self.state.clone()),
            train_config: Some(self.config.clone()),
            canonical: template.and_then(|t| t.canonical),
            depth_scaling: template.and_then(|t| t.depth_scaling),
            metadata: template.map(|t| t.metadata.clone()).unwrap_or_default(),
        }
    }

    /// One optimizer step on an explicit batch.
    pub fn step_on(&mut self, batch: &[&Example]) -> Result<f64> {
        let step = self.state.step;
        let seed = self.config.seed;
        let (loss, grads, stats) = {
            let mut s = Session::new(
                &self.model.params,
                Mode::Train {
                    dropout_seed: splitmix(seed ^ splitmix(step)),
                },
            );
            let l = batch_loss(&self.model, self.objective, &mut s, batch, Some((seed, (1 << 40) + step)))?;
            let loss = s.value(l).item();
            if !loss.is_finite() {
                return Err(CoreError::Config(format!("non-finite loss at step {step}")));
            }
            let grads = s.graph.backward(l);
            (loss, s.param_grads(&grads), s.take_bn_stats())
        };
        self.last_batch_pixels = batch
            .iter()
            .map(|e| match &e.target {
                ExampleTarget::Labels(l) => l.len(),
                ExampleTarget::Map(m) => m.len(),
            })
            .sum();
        self.optimizer.step(&mut self.model.params, &grads)?;
        self.model.params.update_running(&stats);
        self.state.step += 1;
        Ok(loss)
    }

    fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.batch_size)
    }

    /// Next scheduled batch; advances the epoch counter at the end of an epoch.
    /// Returns the loss and whether the step closed an epoch.
    pub fn next_step(&mut self, data: &[Example]) -> Result<(f64, bool)> {
        if data.is_empty() {
            return Err(CoreError::Empty("training set"));
        }
        let order = epoch_order(self.config.seed, self.state.epoch, data.len());
        let bs = self.config.batch_size;
        let start = self.state.batch * bs;
        let batch: Vec<&Example> = order[start..(start + bs).min(data.len())].iter().map(|&i| &data[i]).collect();
        let loss = self.step_on(&batch)?;
        self.state.batch += 1;
        let end = self.state.batch >= self.batches_per_epoch(data.len());
        if end {
            self.state.batch = 0;
            self.state.epoch += 1;
        }
        Ok((loss, end))
    }

    fn budget_spent(&self) -> bool {
        self.config.max_steps.is_some_and(|m| self.state.step >= m)
    }

    /// Trains until the epoch budget, step budget or early stopping ends the
    /// run. With validation data the best parameters are restored at the end.
    pub fn run(&mut self, train: &[Example], val: &[Example], hooks: &mut RunHooks<'_>) -> Result<TrainSummary> {
        let mut losses = Vec::new();
        let mut stopped_early = false;
        while !self.state.finished && self.state.epoch < self.config.epochs && !self.budget_spent() {
            let (loss, epoch_end) = self.next_step(train)?;
            losses.push(loss);
            let mut record = LogRecord {
                step: self.state.step,
                epoch: self.state.epoch - usize::from(epoch_end),
                loss,
                loss_sum: (self.objective == Objective::Segmentation).then_some(loss * self.last_batch_pixels as f64),
                val: None,
            };
            if epoch_end || self.budget_spent() {
                if !val.is_empty() {
                    let v = validation_score(&self.model, self.objective, val)?;
                    record.val = Some(v);
                    if self.state.best_val.is_none_or(|b| v < b) {
                        self.state.best_val = Some(v);
                        self.state.best_epoch = Some(record.epoch);
                        self.state.stale_epochs = 0;
                        self.best_params = Some(self.model.params.clone());
                        if let Some(dir) = hooks.checkpoint_dir {
                            self.checkpoint(hooks.template.as_ref()).save(&dir.join("best.ckpt"))?;
                        }
                    } else if epoch_end {
                        self.state.stale_epochs += 1;
                        if self.state.stale_epochs >= self.config.patience {
                            stopped_early = true;
                            self.state.finished = true;
                        }
                    }
                }
                if let Some(dir) = hooks.checkpoint_dir {
                    self.checkpoint(hooks.template.as_ref()).save(&dir.join("last.ckpt"))?;
                }
            }
            if let Some(f) = hooks.on_record.as_mut() {
                f(&record)?;
            }
        }
        self.state.finished = true;
        if let Some(best) = self.best_params.take() {
            self.model.params = best;
        }
        Ok(TrainSummary {
            steps: self.state.step,
            epochs: self.state.epoch,
            best_val: self.state.best_val,
            best_epoch: self.state.best_epoch,
            stopped_early,
            losses,
        })
    }
}

/// Loss of a batch in evaluation mode, without updating anything.
pub fn eval_loss(model: &Model, objective: Objective, batch: &[&Example]) -> Result<f64> {
    let mut s = Session::new(&model.params, Mode::Eval);
    let l = batch_loss(model, objective, &mut s, batch, None)?;
    Ok(s.value(l).item())
}

