use onh_tensor::{ConvGeom, ParamId, Shape, Var};
use serde::{Deserialize, Serialize};

use super::{BnId, Init, ParamBuilder, Session, INIT_STD, LEAKY_SLOPE};
use crate::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Act {
    /// Leaky ReLU with slope 0.2.
    Leaky,
    Relu,
    Identity,
}

impl Act {
    pub fn apply(self, s: &mut Session<'_>, x: Var) -> Var {
        match self {
            Act::Leaky => s.graph.leaky_relu(x, LEAKY_SLOPE),
            Act::Relu => s.graph.relu(x),
            Act::Identity => x,
        }
    }
}

fn check_channels(layer: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(CoreError::Shape(format!("{layer} expects {expected} input channels, got {got}")));
    }
    Ok(())
}

/// 2-D convolution with weights `[out, in, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeom,
}

impl Conv {
    pub fn new(b: &mut ParamBuilder, name: &str, in_channels: usize, out_channels: usize, geom: ConvGeom, bias: bool) -> Self {
        b.scope(name, |b| {
            let k = geom.kernel;
            let weight = b.param("weight", Shape::new(out_channels, in_channels, k, k), Init::Normal(INIT_STD));
            let bias = bias.then(|| b.param("bias", Shape::new(1, out_channels, 1, 1), Init::Constant(0.0)));
            Conv {
                weight,
                bias,
                in_channels,
                out_channels,
                geom,
            }
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        check_channels("conv", self.in_channels, s.value(x).shape().c())?;
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        Ok(s.graph.conv2d(x, w, b, self.geom)?)
    }
}

/// Transposed convolution with weights `[in, out, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeom,
}

impl ConvTranspose {
    pub fn new(b: &mut ParamBuilder, name: &str, in_channels: usize, out_channels: usize, geom: ConvGeom) -> Self {
        b.scope(name, |b| {
            let k = geom.kernel;
            let weight = b.param("weight", Shape::new(in_channels, out_channels, k, k), Init::Normal(INIT_STD));
            ConvTranspose {
                weight,
                in_channels,
                out_channels,
                geom,
            }
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        check_channels("transposed conv", self.in_channels, s.value(x).shape().c())?;
        let w = s.param(self.weight);
        Ok(s.graph.conv_transpose2d(x, w, None, self.geom)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BnId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        b.scope(name, |b| BatchNorm {
            gamma: b.param("gamma", Shape::new(1, channels, 1, 1), Init::Constant(1.0)),
            beta: b.param("beta", Shape::new(1, channels, 1, 1), Init::Constant(0.0)),
            state: b.batch_norm_state("running", channels),
            channels,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        s.batch_norm(x, self.gamma, self.beta, self.state)
    }
}

/// Convolution, optional batch normalization, activation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnAct {
    pub conv: Conv,
    pub bn: Option<BatchNorm>,
    pub act: Act,
}

impl ConvBnAct {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
        act: Act,
        with_bn: bool,
    ) -> Self {
        b.scope(name, |b| ConvBnAct {
            conv: Conv::new(b, "conv", in_channels, out_channels, geom, !with_bn),
            bn: with_bn.then(|| BatchNorm::new(b, "bn", out_channels)),
            act,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let mut y = self.conv.forward(s, x)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(s, y)?;
        }
        Ok(self.act.apply(s, y))
    }
}
