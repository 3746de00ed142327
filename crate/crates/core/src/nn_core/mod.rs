//! Network building blocks on top of the `onh-tensor` tape.
//!
//! Layers are declared against a [`ParamBuilder`], which records parameter
//! names, shapes and initializers without allocating. [`ParamBuilder::materialize`]
//! turns the declarations into a [`Params`] store. A forward pass runs inside
//! a [`Session`], which owns the tape and collects batch-norm statistics.

mod blocks;
mod layers;

pub use blocks::{BlockConfig, BlockKind, DriBlock, MffBlock, ResidualBlock, SpecialBlock};
pub use layers::{Act, BatchNorm, Conv, ConvBnAct, ConvTranspose};

use std::collections::HashMap;
use std::sync::Arc;

use onh_tensor::{BatchStats, Gradients, Graph, NormMode, ParamId, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

pub const INIT_STD: f64 = 0.02;
/// Weight of the previous running statistic in the moving average.
pub const BN_MOMENTUM: f64 = 0.9;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Normal(f64),
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

/// Handle to a batch-norm layer's running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BnId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnRunning {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Collects parameter declarations under a hierarchical name prefix.
#[derive(Debug, Default)]
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
    bn: Vec<(String, usize)>,
    prefix: Vec<String>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        ParamBuilder::default()
    }

    /// Runs `f` with `name` pushed onto the prefix.
    pub fn scope<T>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.into());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn param(&mut self, name: &str, shape: Shape, init: Init) -> ParamId {
        let name = self.full_name(name);
        self.specs.push(ParamSpec { name, shape, init });
        ParamId(self.specs.len() - 1)
    }

    pub fn batch_norm_state(&mut self, name: &str, channels: usize) -> BnId {
        let name = self.full_name(name);
        self.bn.push((name, channels));
        BnId(self.bn.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn parameter_count(&self) -> usize {
        self.specs.iter().map(|s| s.shape.numel()).sum()
    }

    /// Draws every parameter in declaration order from one seeded stream.
    pub fn materialize(&self, seed: u64) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = self
            .specs
            .iter()
            .map(|s| {
                let data = match s.init {
                    Init::Constant(v) => vec![v; s.shape.numel()],
                    Init::Normal(std) => {
                        let n = Normal::new(0.0, std).expect("finite std");
                        (0..s.shape.numel()).map(|_| n.sample(&mut rng)).collect()
                    }
                };
                Arc::new(Tensor::from_vec(s.shape, data).expect("spec shape"))
            })
            .collect();
        let bn = self
            .bn
            .iter()
            .map(|(name, c)| BnRunning {
                name: name.clone(),
                mean: vec![0.0; *c],
                var: vec![1.0; *c],
            })
            .collect();
        Params {
            names: self.specs.iter().map(|s| s.name.clone()).collect(),
            values,
            bn,
        }
    }
}

/// Trainable parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    bn: Vec<BnRunning>,
}

impl Params {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        if t.shape() != self.values[id.0].shape() {
            return Err(CoreError::Shape(format!(
                "parameter {} expects {}, got {}",
                self.names[id.0],
                self.values[id.0].shape(),
                t.shape()
            )));
        }
        self.values[id.0] = Arc::new(t);
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn parameter_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn bn_states(&self) -> &[BnRunning] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnRunning] {
        &mut self.bn
    }

    /// `running = m * running + (1 - m) * batch` for every collected layer.
    pub fn update_running(&mut self, stats: &[(BnId, BatchStats)]) {
        for (id, s) in stats {
            let r = &mut self.bn[id.0];
            for (rm, bm) in r.mean.iter_mut().zip(&s.mean) {
                *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * bm;
            }
            for (rv, bv) in r.var.iter_mut().zip(&s.var) {
                *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * bv;
            }
        }
    }

    fn arc(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id.0])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout drawn from `dropout_seed`.
    Train { dropout_seed: u64 },
    /// Running statistics, no dropout.
    Eval,
}

/// One forward pass over a parameter store.
pub struct Session<'p> {
    pub graph: Graph,
    params: &'p Params,
    mode: Mode,
    rng: ChaCha8Rng,
    vars: HashMap<ParamId, Var>,
    bn_stats: Vec<(BnId, BatchStats)>,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p Params, mode: Mode) -> Self {
        let seed = match mode {
            Mode::Train { dropout_seed } => dropout_seed,
            Mode::Eval => 0,
        };
        Session {
            graph: Graph::new(),
            params,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            vars: HashMap::new(),
            bn_stats: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.input(t)
    }

    /// Tape node of a parameter; each parameter enters the tape once.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.vars.get(&id) {
            return v;
        }
        let v = self.graph.param(id, self.params.arc(id));
        self.vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub(crate) fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, state: BnId) -> Result<Var> {
        let g = self.param(gamma);
        let b = self.param(beta);
        let params = self.params;
        let (y, stats) = match self.mode {
            Mode::Train { .. } => self.graph.batch_norm(x, g, b, NormMode::Batch)?,
            Mode::Eval => {
                let r = &params.bn[state.0];
                self.graph.batch_norm(
                    x,
                    g,
                    b,
                    NormMode::Running {
                        mean: &r.mean,
                        var: &r.var,
                    },
                )?
            }
        };
        if let Some(s) = stats {
            self.bn_stats.push((state, s));
        }
        Ok(y)
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.is_training() || rate <= 0.0 {
            return Ok(x);
        }
        use rand::Rng;
        let keep = 1.0 - rate;
        let n = self.graph.value(x).len();
        let mask = (0..n)
            .map(|_| if self.rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
            .collect();
        Ok(self.graph.mask(x, mask)?)
    }

    pub fn bn_stats(&self) -> &[(BnId, BatchStats)] {
        &self.bn_stats
    }

    pub fn take_bn_stats(&mut self) -> Vec<(BnId, BatchStats)> {
        std::mem::take(&mut self.bn_stats)
    }

    /// Gradients of every parameter that took part in the pass.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .vars
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
