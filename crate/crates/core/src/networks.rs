//! Encoder-decoder depth network and depth-guided segmentation network.

use onh_tensor::{softmax_channels, ConvGeom, Shape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data_pipeline::FundusImage;
use crate::nn_core::{
    Act, BatchNorm, BlockConfig, BlockKind, Conv, ConvBnAct, ConvTranspose, Mode, MffBlock, ParamBuilder, Params,
    Session, SpecialBlock,
};
use crate::raster::{DepthMap, Grid, ProbabilityMap, NUM_CLASSES};
use crate::{CoreError, Result};

pub const MAX_FILTERS: usize = 512;
pub const DROPOUT_RATE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Tanh,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub input_resolution: usize,
    pub in_channels: usize,
    pub base_filters: usize,
    pub max_filters: usize,
    pub encoder_levels: usize,
    pub block_kind: BlockKind,
    pub dilation_rates: Vec<usize>,
    /// The first this-many decoder levels apply dropout.
    pub dropout_levels: usize,
    pub out_channels: usize,
    pub output_activation: OutputActivation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::depth()
    }
}

impl NetworkConfig {
    /// 256×256 RGB to one tanh channel.
    pub fn depth() -> Self {
        NetworkConfig {
            input_resolution: 256,
            in_channels: 3,
            base_filters: 64,
            max_filters: MAX_FILTERS,
            encoder_levels: 8,
            block_kind: BlockKind::Dri,
            dilation_rates: vec![1, 2, 4],
            dropout_levels: 3,
            out_channels: 1,
            output_activation: OutputActivation::Tanh,
        }
    }

    /// Same trunk with a 3-class softmax head.
    pub fn segmentation() -> Self {
        NetworkConfig {
            out_channels: NUM_CLASSES,
            output_activation: OutputActivation::Softmax,
            ..NetworkConfig::depth()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.encoder_levels;
        if levels == 0 || self.base_filters == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(CoreError::Config("levels, filters and channels must be positive".into()));
        }
        if self.max_filters != MAX_FILTERS {
            return Err(CoreError::Config(format!("max_filters must be {MAX_FILTERS}, got {}", self.max_filters)));
        }
        if levels >= usize::BITS as usize || !self.input_resolution.is_multiple_of(1usize << levels) || self.input_resolution == 0 {
            return Err(CoreError::Config(format!(
                "input resolution {} is not divisible by 2^{levels}",
                self.input_resolution
            )));
        }
        if self.dropout_levels > levels {
            return Err(CoreError::Config(format!(
                "{} dropout levels exceed {levels} decoder levels",
                self.dropout_levels
            )));
        }
        match (self.output_activation, self.out_channels) {
            (OutputActivation::Softmax, c) if c < 2 => {
                Err(CoreError::Config("softmax head needs at least two classes".into()))
            }
            _ => Ok(()),
        }
    }

    /// Filters of encoder level `l` (1-based); level 0 is the base width.
    pub fn filters(&self, level: usize) -> usize {
        let doublings = level.saturating_sub(1).min(usize::BITS as usize - 1);
        self.base_filters.saturating_mul(1 << doublings).min(self.max_filters)
    }

    pub fn filter_schedule(&self) -> Vec<usize> {
        (1..=self.encoder_levels).map(|l| self.filters(l)).collect()
    }

    fn block(&self, channels: usize) -> BlockConfig {
        BlockConfig {
            dilation_rates: self.dilation_rates.clone(),
            ..BlockConfig::new(self.block_kind, channels)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidedConfig {
    pub guide_levels: usize,
    pub guide_channels: usize,
    /// 1-based guide levels whose features are fused into the main branch.
    pub fusion_levels: Vec<usize>,
}

impl Default for GuidedConfig {
    fn default() -> Self {
        GuidedConfig {
            guide_levels: 6,
            guide_channels: 1,
            fusion_levels: vec![2, 4, 6],
        }
    }
}

impl GuidedConfig {
    /// Fusion at every second level of a guide branch with `levels` levels.
    pub fn alternate(levels: usize) -> Self {
        GuidedConfig {
            guide_levels: levels,
            guide_channels: 1,
            fusion_levels: (2..=levels).step_by(2).collect(),
        }
    }

    pub fn validate(&self, main: &NetworkConfig) -> Result<()> {
        if self.guide_levels == 0 || self.guide_levels > main.encoder_levels {
            return Err(CoreError::Config(format!(
                "guide branch needs 1..={} levels, got {}",
                main.encoder_levels, self.guide_levels
            )));
        }
        if self.fusion_levels.is_empty()
            || self.fusion_levels.windows(2).any(|w| w[0] >= w[1])
            || self.fusion_levels.iter().any(|&l| l == 0 || l > self.guide_levels)
        {
            return Err(CoreError::Config(format!(
                "fusion levels {:?} must be increasing within 1..={}",
                self.fusion_levels, self.guide_levels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Depth { net: NetworkConfig },
    Segmentation { net: NetworkConfig, guide: Option<GuidedConfig> },
}

impl ModelConfig {
    pub fn net(&self) -> &NetworkConfig {
        match self {
            ModelConfig::Depth { net } | ModelConfig::Segmentation { net, .. } => net,
        }
    }

    pub fn guide(&self) -> Option<&GuidedConfig> {
        match self {
            ModelConfig::Segmentation { guide, .. } => guide.as_ref(),
            ModelConfig::Depth { .. } => None,
        }
    }
}

/// Stride-2 4×4 convolution, BN, leaky ReLU, then a special block.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLevel {
    pub down: ConvBnAct,
    pub block: SpecialBlock,
    pub channels: usize,
}

impl EncoderLevel {
    fn new(b: &mut ParamBuilder, name: &str, cfg: &NetworkConfig, cin: usize, cout: usize, bn: bool) -> Result<Self> {
        b.scope(name, |b| {
            Ok(EncoderLevel {
                down: ConvBnAct::new(b, "down", cin, cout, ConvGeom::new(4, 2, 1, 1), Act::Leaky, bn),
                block: SpecialBlock::new(b, "block", &cfg.block(cout), Act::Leaky)?,
                channels: cout,
            })
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let y = self.down.forward(s, x)?;
        self.block.forward(s, y)
    }
}

/// Stride-2 4×4 transposed convolution, BN, ReLU, optional dropout, skip
/// concatenation and a special block on the concatenated features.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLevel {
    pub up: ConvTranspose,
    pub bn: BatchNorm,
    pub dropout: bool,
    pub skip: bool,
    pub block: SpecialBlock,
    pub out_channels: usize,
}

impl DecoderLevel {
    fn forward(&self, s: &mut Session<'_>, x: Var, skip: Option<Var>) -> Result<Var> {
        let y = self.up.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        let mut y = s.graph.relu(y);
        if self.dropout {
            y = s.dropout(y, DROPOUT_RATE)?;
        }
        if let Some(skip) = skip {
            y = s.graph.concat(&[y, skip])?;
        }
        self.block.forward(s, y)
    }
}

/// U-Net style encoder-decoder with a 1×1 output head.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub config: NetworkConfig,
    pub encoder: Vec<EncoderLevel>,
    pub decoder: Vec<DecoderLevel>,
    pub head: Conv,
}

impl UNet {
    pub fn new(b: &mut ParamBuilder, cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let levels = cfg.encoder_levels;
        let mut encoder = Vec::with_capacity(levels);
        let mut cin = cfg.in_channels;
        for l in 1..=levels {
            let cout = cfg.filters(l);
            // The innermost level may be 1×1 where batch statistics degenerate.
            encoder.push(EncoderLevel::new(b, &format!("enc{l}"), cfg, cin, cout, l < levels)?);
            cin = cout;
        }
        let mut decoder = Vec::with_capacity(levels);
        for l in (1..=levels).rev() {
            let k = levels - l;
            let cin = if l == levels { cfg.filters(levels) } else { 2 * cfg.filters(l) };
            let cout = if l > 1 { cfg.filters(l - 1) } else { cfg.base_filters };
            let skip = l > 1;
            let block_channels = if skip { 2 * cout } else { cout };
            let level = b.scope(format!("dec{l}"), |b| -> Result<DecoderLevel> {
                Ok(DecoderLevel {
                    up: ConvTranspose::new(b, "up", cin, cout, ConvGeom::new(4, 2, 1, 1)),
                    bn: BatchNorm::new(b, "bn", cout),
                    dropout: k < cfg.dropout_levels,
                    skip,
                    block: SpecialBlock::new(b, "block", &cfg.block(block_channels), Act::Relu)?,
                    out_channels: block_channels,
                })
            })?;
            decoder.push(level);
        }
        let head = Conv::new(b, "head", cfg.base_filters, cfg.out_channels, ConvGeom::same(1, 1), true);
        Ok(UNet {
            config: cfg.clone(),
            encoder,
            decoder,
            head,
        })
    }

    fn decode(&self, s: &mut Session<'_>, skips: &[Var]) -> Result<Var> {
        let levels = self.encoder.len();
        let mut x = skips[levels - 1];
        for (k, level) in self.decoder.iter().enumerate() {
            let l = levels - k;
            let skip = level.skip.then(|| skips[l - 2]);
            x = level.forward(s, x, skip)?;
        }
        self.head.forward(s, x)
    }

    /// Dropout flag of each decoder level, innermost first.
    pub fn dropout_flags(&self) -> Vec<bool> {
        self.decoder.iter().map(|d| d.dropout).collect()
    }
}

/// Depth encoder feeding fusion blocks of the main branch.
#[derive(Clone, Debug, PartialEq)]
pub struct GuideBranch {
    pub config: GuidedConfig,
    pub encoder: Vec<EncoderLevel>,
    /// `(guide level, block)` pairs, 1-based levels.
    pub fusions: Vec<(usize, MffBlock)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    pub main: UNet,
    pub guide: Option<GuideBranch>,
}

impl SegNet {
    pub fn new(b: &mut ParamBuilder, cfg: &NetworkConfig, gcfg: Option<&GuidedConfig>) -> Result<Self> {
        if cfg.output_activation != OutputActivation::Softmax {
            return Err(CoreError::Config("segmentation needs a softmax head".into()));
        }
        let main = b.scope("main", |b| UNet::new(b, cfg))?;
        let guide = match gcfg {
            None => None,
            Some(g) => {
                g.validate(cfg)?;
                Some(b.scope("guide", |b| -> Result<GuideBranch> {
                    let mut encoder = Vec::with_capacity(g.guide_levels);
                    let mut cin = g.guide_channels;
                    for l in 1..=g.guide_levels {
                        let cout = cfg.filters(l);
                        encoder.push(EncoderLevel::new(b, &format!("enc{l}"), cfg, cin, cout, true)?);
                        cin = cout;
                    }
                    let fusions = g
                        .fusion_levels
                        .iter()
                        .map(|&l| Ok((l, MffBlock::new(b, &format!("mff{l}"), &cfg.block(cfg.filters(l)))?)))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(GuideBranch {
                        config: g.clone(),
                        encoder,
                        fusions,
                    })
                })?)
            }
        };
        Ok(SegNet { main, guide })
    }

    pub fn fusion_points(&self) -> usize {
        self.guide.as_ref().map_or(0, |g| g.fusions.len())
    }

    fn logits(&self, s: &mut Session<'_>, image: Var, guide: Option<Var>) -> Result<Var> {
        let mut x = image;
        let mut g = match (&self.guide, guide) {
            (Some(_), Some(g)) => Some(g),
            (Some(_), None) => return Err(CoreError::Config("guided network needs a guide input".into())),
            (None, _) => None,
        };
        if let Some(gv) = g {
            let (is, gs) = (s.value(x).shape(), s.value(gv).shape());
            if (is.n(), is.h(), is.w()) != (gs.n(), gs.h(), gs.w()) {
                return Err(CoreError::Shape(format!("image {is} and guide {gs} differ")));
            }
        }
        let mut skips = Vec::with_capacity(self.main.encoder.len());
        for (i, level) in self.main.encoder.iter().enumerate() {
            let l = i + 1;
            x = level.forward(s, x)?;
            if let (Some(branch), Some(gv)) = (&self.guide, g) {
                if l <= branch.encoder.len() {
                    let gl = branch.encoder[i].forward(s, gv)?;
                    g = Some(gl);
                    if let Some((_, mff)) = branch.fusions.iter().find(|(fl, _)| *fl == l) {
                        x = mff.forward(s, x, gl)?;
                    }
                }
            }
            skips.push(x);
        }
        self.main.decode(s, &skips)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Arch {
    Depth(UNet),
    Segmentation(SegNet),
}

/// Architecture plus parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub arch: Arch,
    pub params: Params,
}

impl Model {
    /// Architecture and parameter declarations without allocating weights.
    pub fn describe(config: &ModelConfig) -> Result<(Arch, ParamBuilder)> {
        let mut b = ParamBuilder::new();
        let arch = match config {
            ModelConfig::Depth { net } => {
                if net.output_activation != OutputActivation::Tanh {
                    return Err(CoreError::Config("depth network needs a tanh head".into()));
                }
                Arch::Depth(UNet::new(&mut b, net)?)
            }
            ModelConfig::Segmentation { net, guide } => Arch::Segmentation(SegNet::new(&mut b, net, guide.as_ref())?),
        };
        Ok((arch, b))
    }

    pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        let (arch, b) = Model::describe(&config)?;
        Ok(Model {
            config,
            arch,
            params: b.materialize(seed),
        })
    }

    pub fn net(&self) -> &NetworkConfig {
        self.config.net()
    }

    pub fn is_guided(&self) -> bool {
        matches!(&self.arch, Arch::Segmentation(SegNet { guide: Some(_), .. }))
    }

    fn check_input(&self, t: &Tensor, channels: usize, what: &str) -> Result<()> {
        let s = t.shape();
        let r = self.net().input_resolution;
        if s.c() != channels || s.h() != r || s.w() != r {
            return Err(CoreError::Shape(format!(
                "{what} must be [N, {channels}, {r}, {r}], got {s}"
            )));
        }
        Ok(())
    }

    /// Raw head output: tanh values for depth, logits for segmentation.
    pub fn forward(&self, s: &mut Session<'_>, image: Var, guide: Option<Var>) -> Result<Var> {
        self.check_input(s.value(image), self.net().in_channels, "image")?;
        if let (Some(g), Some(gc)) = (guide, self.config.guide()) {
            self.check_input(s.value(g), gc.guide_channels, "guide")?;
        }
        match &self.arch {
            Arch::Depth(net) => {
                let mut x = image;
                let mut skips = Vec::with_capacity(net.encoder.len());
                for level in &net.encoder {
                    x = level.forward(s, x)?;
                    skips.push(x);
                }
                let y = net.decode(s, &skips)?;
                Ok(s.graph.tanh(y))
            }
            Arch::Segmentation(net) => net.logits(s, image, guide),
        }
    }

    /// Depth in `[0, 1]` for a batch `[N, 3, H, W]`.
    pub fn predict_depth(&self, images: &Tensor) -> Result<Tensor> {
        let mut s = Session::new(&self.params, Mode::Eval);
        let x = s.input(images.clone());
        let y = self.forward(&mut s, x, None)?;
        Ok(s.value(y).map(|t| 0.5 * (t + 1.0)))
    }

    /// Class probabilities for a batch.
    pub fn predict_probabilities(&self, images: &Tensor, guides: Option<&Tensor>) -> Result<Tensor> {
        let mut s = Session::new(&self.params, Mode::Eval);
        let x = s.input(images.clone());
        let g = guides.map(|g| s.input(g.clone()));
        let y = self.forward(&mut s, x, g)?;
        Ok(softmax_channels(s.value(y)))
    }
}

fn depth_from_tensor(t: &Tensor, n: usize) -> DepthMap {
    let s = t.shape();
    Grid::from_vec(s.h(), s.w(), t.item_slice(n).to_vec()).expect("single-channel output")
}

/// Depth of one normalized image, mapped from tanh's range to `[0, 1]`.
pub fn forward_depth(model: &Model, image: &FundusImage) -> Result<DepthMap> {
    if !matches!(model.arch, Arch::Depth(_)) {
        return Err(CoreError::Config("not a depth model".into()));
    }
    let out = model.predict_depth(&image.to_tensor())?;
    Ok(depth_from_tensor(&out, 0))
}

/// Per-pixel class distribution of one image and optional guide map.
pub fn forward_seg(model: &Model, image: &FundusImage, guide: Option<&DepthMap>) -> Result<ProbabilityMap> {
    if !matches!(model.arch, Arch::Segmentation(_)) {
        return Err(CoreError::Config("not a segmentation model".into()));
    }
    if let Some(g) = guide {
        if g.dims() != (image.height(), image.width()) {
            return Err(CoreError::Shape(format!(
                "guide {:?} vs image {}x{}",
                g.dims(),
                image.height(),
                image.width()
            )));
        }
    }
    let guide_t = match (model.is_guided(), guide) {
        (true, Some(g)) => Some(g.to_tensor()),
        (true, None) => return Err(CoreError::Config("guided model needs a guide map".into())),
        (false, _) => None,
    };
    let p = model.predict_probabilities(&image.to_tensor(), guide_t.as_ref())?;
    Ok(ProbabilityMap::from_tensor(&p, 0))
}

/// Stacks single-channel maps into `[N, 1, H, W]`.
pub fn stack_maps(maps: &[&Grid<f64>]) -> Result<Tensor> {
    let (h, w) = maps.first().map(|m| m.dims()).ok_or(CoreError::Empty("map batch"))?;
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        if m.dims() != (h, w) {
            return Err(CoreError::Shape("maps in a batch differ in size".into()));
        }
        data.extend_from_slice(m.data());
    }
    Ok(Tensor::from_vec(Shape::new(maps.len(), 1, h, w), data)?)
}
