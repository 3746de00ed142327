use onh_tensor::{ConvGeom, Var};
use serde::{Deserialize, Serialize};

use super::layers::{Act, BatchNorm, Conv, ConvBnAct};
use super::{ParamBuilder, Session};
use crate::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Plain 3×3 conv-BN-activation.
    Conv,
    Residual,
    Dri,
}

impl std::str::FromStr for BlockKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(BlockKind::Conv),
            "residual" => Ok(BlockKind::Residual),
            "dri" => Ok(BlockKind::Dri),
            other => Err(CoreError::Config(format!("unknown block kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Dilation rates of the 3×3 branches (DRI only).
    pub dilation_rates: Vec<usize>,
}

impl BlockConfig {
    pub fn new(kind: BlockKind, channels: usize) -> Self {
        BlockConfig {
            kind,
            in_channels: channels,
            out_channels: channels,
            dilation_rates: vec![1, 2, 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(CoreError::Config("block channels must be positive".into()));
        }
        match self.kind {
            BlockKind::Conv => Ok(()),
            BlockKind::Residual | BlockKind::Dri if self.in_channels != self.out_channels => Err(CoreError::Config(
                format!(
                    "{:?} block needs equal in/out channels, got {} -> {}",
                    self.kind, self.in_channels, self.out_channels
                ),
            )),
            BlockKind::Residual => Ok(()),
            BlockKind::Dri => {
                if self.dilation_rates.is_empty() {
                    return Err(CoreError::Config("DRI block needs at least one dilation rate".into()));
                }
                if self.dilation_rates[0] == 0 || self.dilation_rates.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(CoreError::Config(format!(
                        "DRI dilation rates must be positive and strictly increasing, got {:?}",
                        self.dilation_rates
                    )));
                }
                Ok(())
            }
        }
    }
}

/// `x + BN(conv3(act(BN(conv3(x)))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub first: ConvBnAct,
    pub second: Conv,
    pub bn: BatchNorm,
}

impl ResidualBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize, act: Act) -> Self {
        b.scope(name, |b| ResidualBlock {
            first: ConvBnAct::new(b, "a", channels, channels, ConvGeom::same(3, 1), act, true),
            second: Conv::new(b, "b", channels, channels, ConvGeom::same(3, 1), false),
            bn: BatchNorm::new(b, "b_bn", channels),
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.first.forward(s, x)?;
        let h = self.second.forward(s, h)?;
        let h = self.bn.forward(s, h)?;
        Ok(s.graph.add(x, h)?)
    }
}

/// Dilated residual inception block: a 1×1 branch and one 3×3 branch per
/// dilation rate, concatenated, projected back by a 1×1 convolution and
/// added to the input.
#[derive(Clone, Debug, PartialEq)]
pub struct DriBlock {
    pub branches: Vec<Conv>,
    pub projection: Conv,
    pub act: Act,
}

impl DriBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize, rates: &[usize], act: Act) -> Result<Self> {
        BlockConfig {
            kind: BlockKind::Dri,
            in_channels: channels,
            out_channels: channels,
            dilation_rates: rates.to_vec(),
        }
        .validate()?;
        let width = (channels / (rates.len() + 1)).max(1);
        Ok(b.scope(name, |b| {
            let mut branches = vec![Conv::new(b, "branch1x1", channels, width, ConvGeom::same(1, 1), true)];
            for &r in rates {
                branches.push(Conv::new(b, &format!("branch3x3_d{r}"), channels, width, ConvGeom::same(3, r), true));
            }
            let projection = Conv::new(b, "projection", width * branches.len(), channels, ConvGeom::same(1, 1), true);
            DriBlock {
                branches,
                projection,
                act,
            }
        }))
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.branches.len());
        for br in &self.branches {
            let y = br.forward(s, x)?;
            outs.push(self.act.apply(s, y));
        }
        let cat = s.graph.concat(&outs)?;
        let p = self.projection.forward(s, cat)?;
        Ok(s.graph.add(x, p)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SpecialBlock {
    Conv(ConvBnAct),
    Residual(ResidualBlock),
    Dri(DriBlock),
}

impl SpecialBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, cfg: &BlockConfig, act: Act) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            BlockKind::Conv => SpecialBlock::Conv(ConvBnAct::new(
                b,
                name,
                cfg.in_channels,
                cfg.out_channels,
                ConvGeom::same(3, 1),
                act,
                true,
            )),
            BlockKind::Residual => SpecialBlock::Residual(ResidualBlock::new(b, name, cfg.in_channels, act)),
            BlockKind::Dri => SpecialBlock::Dri(DriBlock::new(b, name, cfg.in_channels, &cfg.dilation_rates, act)?),
        })
    }

    pub fn kind(&self) -> BlockKind {
        match self {
            SpecialBlock::Conv(_) => BlockKind::Conv,
            SpecialBlock::Residual(_) => BlockKind::Residual,
            SpecialBlock::Dri(_) => BlockKind::Dri,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        match self {
            SpecialBlock::Conv(c) => c.forward(s, x),
            SpecialBlock::Residual(r) => r.forward(s, x),
            SpecialBlock::Dri(d) => d.forward(s, x),
        }
    }
}

/// Multimodal feature fusion: two special blocks per modality, element-wise
/// sum, then a 3×3 conv-BN-ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct MffBlock {
    pub image_branch: [SpecialBlock; 2],
    pub guide_branch: [SpecialBlock; 2],
    pub fuse: ConvBnAct,
    pub channels: usize,
}

impl MffBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, cfg: &BlockConfig) -> Result<Self> {
        let c = cfg.in_channels;
        b.scope(name, |b| {
            Ok(MffBlock {
                image_branch: [
                    SpecialBlock::new(b, "image0", cfg, Act::Relu)?,
                    SpecialBlock::new(b, "image1", cfg, Act::Relu)?,
                ],
                guide_branch: [
                    SpecialBlock::new(b, "guide0", cfg, Act::Relu)?,
                    SpecialBlock::new(b, "guide1", cfg, Act::Relu)?,
                ],
                fuse: ConvBnAct::new(b, "fuse", c, c, ConvGeom::same(3, 1), Act::Relu, true),
                channels: c,
            })
        })
    }

    /// Branch outputs before the sum, exposed for inspection.
    pub fn branches(&self, s: &mut Session<'_>, image: Var, guide: Var) -> Result<(Var, Var)> {
        let (is, gs) = (s.value(image).shape(), s.value(guide).shape());
        if is != gs {
            return Err(CoreError::Shape(format!("fusion inputs differ: {is} vs {gs}")));
        }
        let mut a = image;
        for blk in &self.image_branch {
            a = blk.forward(s, a)?;
        }
        let mut g = guide;
        for blk in &self.guide_branch {
            g = blk.forward(s, g)?;
        }
        Ok((a, g))
    }

    pub fn forward(&self, s: &mut Session<'_>, image: Var, guide: Var) -> Result<Var> {
        let (a, g) = self.branches(s, image, guide)?;
        let sum = s.graph.add(a, g)?;
        self.fuse.forward(s, sum)
    }
}
