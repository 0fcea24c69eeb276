//! Configurable 2D/3D U-Net with optional deep-supervision heads, plus the
//! trainer and predictor hooks that plug it into `medseg`.

use std::path::PathBuf;

use candle_core::Tensor;
use medseg::inference::{Predictor, PredictorHooks};
use medseg::layer::{build_conv_block, ConvBlockSpec, Kwargs, LayerDescriptor, LayerKind, CONV2D, CONV3D, CONV_TRANSPOSE2D, CONV_TRANSPOSE3D};
use medseg::nn::{Module, Network, Param, Sequential};
use medseg::preset::SegmentationConfig;
use medseg::training::TrainerHooks;
use medseg::{args, kwargs, Error, Result};
use serde_json::json;

pub const DEFAULT_DEPTH: usize = 5;
pub const DEFAULT_BASE_CHANNELS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct UNetSpec {
    pub dims: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Number of resolution levels, bottleneck included.
    pub depth: usize,
    /// Channels at full resolution; doubled per level.
    pub base_channels: usize,
    pub deep_supervision: bool,
    pub block: ConvBlockSpec,
}

impl UNetSpec {
    pub fn new(dims: usize, in_channels: usize, num_classes: usize) -> Result<Self> {
        Ok(Self {
            dims,
            in_channels,
            num_classes,
            depth: DEFAULT_DEPTH,
            base_channels: DEFAULT_BASE_CHANNELS,
            deep_supervision: false,
            block: ConvBlockSpec::for_dims(dims)?,
        })
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_base_channels(mut self, base: usize) -> Self {
        self.base_channels = base;
        self
    }

    pub fn with_deep_supervision(mut self, on: bool) -> Self {
        self.deep_supervision = on;
        self
    }

    pub fn with_block(mut self, block: ConvBlockSpec) -> Self {
        self.block = block;
        self
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn num_outputs(&self) -> usize {
        if self.deep_supervision {
            self.depth - 1
        } else {
            1
        }
    }

    fn validate(&self) -> Result<()> {
        if !matches!(self.dims, 2 | 3) {
            return Err(Error::Config(format!("U-Net supports 2 or 3 spatial dims, got {}", self.dims)));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.base_channels == 0 {
            return Err(Error::Config("U-Net channel counts must be positive".into()));
        }
        if self.depth < 2 {
            return Err(Error::Config(format!("U-Net depth must be at least 2, got {}", self.depth)));
        }
        Ok(())
    }

    fn kinds(&self) -> (LayerKind, LayerKind) {
        if self.dims == 2 {
            (CONV2D, CONV_TRANSPOSE2D)
        } else {
            (CONV3D, CONV_TRANSPOSE3D)
        }
    }
}

fn double_conv(in_ch: usize, out_ch: usize, block: &ConvBlockSpec) -> Result<Sequential> {
    let pad = kwargs! { "padding" => 1usize };
    let mut s = Sequential::new();
    s.push_named("0", Box::new(build_conv_block(in_ch, out_ch, 3, block, &pad)?));
    s.push_named("1", Box::new(build_conv_block(out_ch, out_ch, 3, block, &pad)?));
    Ok(s)
}

struct Level {
    /// Strided convolution into this level; absent at full resolution.
    down: Option<Box<dyn Module>>,
    convs: Sequential,
}

struct UpLevel {
    up: Box<dyn Module>,
    convs: Sequential,
}

pub struct UNet {
    spec: UNetSpec,
    encoder: Vec<Level>,
    /// `decoder[i]` produces resolution level `i`.
    decoder: Vec<UpLevel>,
    /// `heads[i]` reads `decoder[i]`.
    heads: Vec<Box<dyn Module>>,
}

impl UNet {
    pub fn new(spec: UNetSpec) -> Result<Self> {
        spec.validate()?;
        let (conv, up) = spec.kinds();
        let mut encoder = Vec::with_capacity(spec.depth);
        for level in 0..spec.depth {
            let (down, in_ch) = if level == 0 {
                (None, spec.in_channels)
            } else {
                let c = spec.channels(level - 1);
                let d = LayerDescriptor::new(conv).with("stride", 2usize).assemble(&args![c, c, 2], &Kwargs::new())?;
                (Some(d), c)
            };
            encoder.push(Level { down, convs: double_conv(in_ch, spec.channels(level), &spec.block)? });
        }
        let mut decoder = Vec::with_capacity(spec.depth - 1);
        for level in 0..spec.depth - 1 {
            let (c, below) = (spec.channels(level), spec.channels(level + 1));
            let u = LayerDescriptor::new(up).with("stride", 2usize).assemble(&args![below, c, 2], &Kwargs::new())?;
            decoder.push(UpLevel { up: u, convs: double_conv(2 * c, c, &spec.block)? });
        }
        let heads = (0..spec.num_outputs())
            .map(|level| LayerDescriptor::new(conv).assemble(&args![spec.channels(level), spec.num_classes, 1], &Kwargs::new()))
            .collect::<Result<_>>()?;
        Ok(Self { spec, encoder, decoder, heads })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }
}

impl Network for UNet {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let spatial = xs.dims().get(2..).unwrap_or_default();
        let div = self.spec.size_divisor();
        if xs.rank() != self.spec.dims + 2 || spatial.iter().any(|&s| s == 0 || s % div != 0) {
            return Err(Error::Shape(format!(
                "U-Net of depth {} needs a (B, {}, ...) input with spatial sizes divisible by {div}, got {:?}",
                self.spec.depth,
                self.spec.in_channels,
                xs.dims()
            )));
        }
        let mut skips = Vec::with_capacity(self.spec.depth);
        let mut x = xs.clone();
        for level in &self.encoder {
            if let Some(d) = &level.down {
                x = d.forward_t(&x, train)?;
            }
            x = level.convs.forward_t(&x, train)?;
            skips.push(x.clone());
        }
        let mut decoded = vec![None; self.spec.depth - 1];
        for i in (0..self.spec.depth - 1).rev() {
            let up = self.decoder[i].up.forward_t(&x, train)?;
            x = self.decoder[i].convs.forward_t(&Tensor::cat(&[&up, &skips[i]], 1)?, train)?;
            decoded[i] = Some(x.clone());
        }
        self.heads
            .iter()
            .enumerate()
            .map(|(i, h)| h.forward_t(decoded[i].as_ref().expect("decoded"), train))
            .collect()
    }

    fn collect_params(&self, out: &mut Vec<Param>) {
        for (i, level) in self.encoder.iter().enumerate() {
            if let Some(d) = &level.down {
                d.collect_params(&format!("encoder.{i}.down"), out);
            }
            level.convs.collect_params(&format!("encoder.{i}.convs"), out);
        }
        for (i, level) in self.decoder.iter().enumerate() {
            level.up.collect_params(&format!("decoder.{i}.up"), out);
            level.convs.collect_params(&format!("decoder.{i}.convs"), out);
        }
        for (i, h) in self.heads.iter().enumerate() {
            h.collect_params(&format!("heads.{i}"), out);
        }
    }

    fn num_outputs(&self) -> usize {
        self.spec.num_outputs()
    }

    fn describe(&self) -> serde_json::Value {
        let s = &self.spec;
        json!({
            "type": "UNet",
            "dims": s.dims,
            "in_channels": s.in_channels,
            "num_classes": s.num_classes,
            "depth": s.depth,
            "base_channels": s.base_channels,
            "deep_supervision": s.deep_supervision,
            "block": [format!("{:?}", s.block.conv), format!("{:?}", s.block.norm), format!("{:?}", s.block.act)],
        })
    }
}

fn make(dims: usize, in_ch: usize, num_classes: usize, depth: usize, base: usize, deep_supervision: bool) -> Result<UNet> {
    UNet::new(
        UNetSpec::new(dims, in_ch, num_classes)?
            .with_depth(depth)
            .with_base_channels(base)
            .with_deep_supervision(deep_supervision),
    )
}

pub fn make_unet2d(in_ch: usize, num_classes: usize, depth: usize, base: usize, deep_supervision: bool) -> Result<UNet> {
    make(2, in_ch, num_classes, depth, base, deep_supervision)
}

pub fn make_unet3d(in_ch: usize, num_classes: usize, depth: usize, base: usize, deep_supervision: bool) -> Result<UNet> {
    make(3, in_ch, num_classes, depth, base, deep_supervision)
}

/// Network hooks shared by [`UNetTrainer`] and [`UNetPredictor`]. Only the
/// network is customized; everything else is the segmentation preset.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetTrainer {
    pub depth: usize,
    pub base_channels: usize,
    /// Replaces the default conv/norm/activation block when set.
    pub block: Option<ConvBlockSpec>,
}

impl Default for UNetTrainer {
    fn default() -> Self {
        Self { depth: DEFAULT_DEPTH, base_channels: DEFAULT_BASE_CHANNELS, block: None }
    }
}

impl UNetTrainer {
    pub fn new(depth: usize, base_channels: usize) -> Self {
        Self { depth, base_channels, block: None }
    }

    pub fn spec(&self, example_shape: &[usize], config: &SegmentationConfig) -> Result<UNetSpec> {
        let in_ch = *example_shape.first().ok_or_else(|| Error::Shape("empty example shape".into()))?;
        let mut spec = UNetSpec::new(config.num_dims, in_ch, config.output_channels())?
            .with_depth(self.depth)
            .with_base_channels(self.base_channels)
            .with_deep_supervision(config.deep_supervision);
        if let Some(b) = &self.block {
            spec = spec.with_block(b.clone());
        }
        Ok(spec)
    }

    fn network(&self, example_shape: &[usize], config: &SegmentationConfig) -> Result<Box<dyn Network>> {
        Ok(Box::new(UNet::new(self.spec(example_shape, config)?)?))
    }
}

impl TrainerHooks for UNetTrainer {
    fn trainer_name(&self) -> String {
        "UNetTrainer".into()
    }

    fn build_network(&self, example_shape: &[usize], config: &SegmentationConfig) -> Result<Box<dyn Network>> {
        self.network(example_shape, config)
    }
}

impl PredictorHooks for UNetTrainer {
    fn build_network(&self, example_shape: &[usize], config: &SegmentationConfig) -> Result<Box<dyn Network>> {
        self.network(example_shape, config)
    }
}

pub type UNetPredictor = Predictor<UNetTrainer>;

/// Predictor over a U-Net experiment folder with the default architecture.
pub fn unet_predictor(folder: impl Into<PathBuf>, example_shape: &[usize], config: SegmentationConfig) -> UNetPredictor {
    Predictor::new(UNetTrainer::default(), folder, example_shape, config)
}
