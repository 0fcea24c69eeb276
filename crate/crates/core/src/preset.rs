//! Defaults for segmentation training: Dice + cross-entropy loss (wrapped
//! for deep supervision), Nesterov SGD, polynomial decay, gradient clipping
//! and divisor padding.

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{Criterion, DeepSupervisionWrapper, DiceCeLoss};
use crate::nn::Param;
use crate::training::optim::{clip_grad_norm, PolyScheduler, Sgd, DEFAULT_EMA_DECAY};

pub const DEFAULT_BASE_LR: f64 = 1e-2;
pub const DEFAULT_MOMENTUM: f64 = 0.99;
pub const DEFAULT_CLIP_NORM: f64 = 12.0;
pub const DEFAULT_PADDING_DIVISOR: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    /// 1 selects binary segmentation.
    pub num_classes: usize,
    pub num_dims: usize,
    pub deep_supervision: bool,
    pub ema: bool,
    pub ema_decay: f64,
    pub base_lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub padding_divisor: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            num_classes: 1,
            num_dims: 2,
            deep_supervision: false,
            ema: false,
            ema_decay: DEFAULT_EMA_DECAY,
            base_lr: DEFAULT_BASE_LR,
            momentum: DEFAULT_MOMENTUM,
            nesterov: true,
            weight_decay: 0.0,
            clip_norm: DEFAULT_CLIP_NORM,
            padding_divisor: DEFAULT_PADDING_DIVISOR,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if !matches!(self.num_dims, 2 | 3) {
            return Err(Error::Config(format!("num_dims must be 2 or 3, got {}", self.num_dims)));
        }
        if self.padding_divisor == 0 || !(self.clip_norm > 0.0) || !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config("padding_divisor, clip_norm and ema_decay must be positive (ema_decay at most 1)".into()));
        }
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.num_classes == 1
    }

    /// Channels the network must output at full resolution.
    pub fn output_channels(&self) -> usize {
        self.num_classes
    }
}

pub fn default_optimizer(params: &[Param], config: &SegmentationConfig) -> Result<Sgd> {
    Sgd::new(params, config.base_lr, config.momentum, config.nesterov, config.weight_decay)
}

pub fn default_scheduler(config: &SegmentationConfig, total_epochs: usize) -> PolyScheduler {
    PolyScheduler::new(config.base_lr, total_epochs)
}

/// Dice + CE for `num_classes`, wrapped with normalized `2^-i` weights when
/// deep supervision is on.
pub fn default_criterion(num_classes: usize, deep_supervision: bool, num_scales: usize) -> Result<Box<dyn Criterion>> {
    let base = DiceCeLoss::new(num_classes)?;
    Ok(if deep_supervision {
        Box::new(DeepSupervisionWrapper::new(Box::new(base), num_scales)?)
    } else {
        Box::new(base)
    })
}

/// Backpropagates `loss` and clips the global gradient norm of `params`.
/// Returns the gradients and the norm before clipping.
pub fn backward_with_clip(loss: &Tensor, params: &[Param], clip_norm: f64) -> Result<(GradStore, f64)> {
    let mut grads = loss.backward()?;
    let norm = clip_grad_norm(params, &mut grads, clip_norm)?;
    Ok((grads, norm))
}

/// Zero padding of every spatial axis up to the next multiple of a divisor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaddingModule {
    pub divisor: usize,
}

/// Amounts added before and after each spatial axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Padding {
    pub before: Vec<usize>,
    pub after: Vec<usize>,
}

impl Default for PaddingModule {
    fn default() -> Self {
        Self { divisor: DEFAULT_PADDING_DIVISOR }
    }
}

impl PaddingModule {
    pub fn new(divisor: usize) -> Self {
        Self { divisor: divisor.max(1) }
    }

    /// Split of the padding per axis; an odd remainder goes after.
    pub fn plan(&self, spatial: &[usize]) -> Padding {
        let (mut before, mut after) = (Vec::new(), Vec::new());
        for &n in spatial {
            let total = n.div_ceil(self.divisor) * self.divisor - n;
            before.push(total / 2);
            after.push(total - total / 2);
        }
        Padding { before, after }
    }

    /// Pads the spatial axes (all after the first two) of `x`.
    pub fn pad(&self, x: &Tensor) -> Result<(Tensor, Padding)> {
        if x.rank() < 3 {
            return Err(Error::Shape(format!("padding expects (B, C, ...), got {:?}", x.dims())));
        }
        let padding = self.plan(&x.dims()[2..]);
        Ok((padding.apply(x)?, padding))
    }
}

impl Padding {
    pub fn is_identity(&self) -> bool {
        self.before.iter().chain(&self.after).all(|&p| p == 0)
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.clone();
        for (a, (&b, &e)) in self.before.iter().zip(&self.after).enumerate() {
            if b + e > 0 {
                out = out.pad_with_zeros(a + 2, b, e)?;
            }
        }
        Ok(out)
    }

    /// Inverse of [`Padding::apply`] on any tensor with the same spatial layout.
    pub fn crop(&self, y: &Tensor) -> Result<Tensor> {
        let mut out = y.clone();
        for (a, (&b, &e)) in self.before.iter().zip(&self.after).enumerate() {
            let len = out.dim(a + 2)?;
            if b + e > len {
                return Err(Error::Shape(format!("cannot crop {b}+{e} from axis of length {len}")));
            }
            out = out.narrow(a + 2, b, len - b - e)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn already_divisible() {
        let p = PaddingModule::default().plan(&[384, 384]);
        assert!(p.is_identity());
    }

    #[test]
    fn pads_to_multiple_and_crops_back() {
        let m = PaddingModule::new(16);
        let x = Tensor::arange(0f32, 2.0 * 100.0 * 100.0, &Device::Cpu).unwrap().reshape((1, 2, 100, 100)).unwrap();
        let (y, p) = m.pad(&x).unwrap();
        assert_eq!(y.dims(), &[1, 2, 112, 112]);
        assert_eq!((p.before.clone(), p.after.clone()), (vec![6, 6], vec![6, 6]));
        let back = p.crop(&y).unwrap();
        assert_eq!(back.dims(), x.dims());
        assert_eq!(back.flatten_all().unwrap().to_vec1::<f32>().unwrap(), x.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        // padded border is zero
        assert_eq!(y.narrow(2, 0, 6).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn odd_remainder_goes_after() {
        let p = PaddingModule::new(16).plan(&[13, 16, 1]);
        assert_eq!(p.before, vec![1, 0, 7]);
        assert_eq!(p.after, vec![2, 0, 8]);
    }

    #[test]
    fn pads_integer_maps() {
        let y = Tensor::new(&[[[[1i64, 2, 3]]]], &Device::Cpu).unwrap();
        let (p, pad) = PaddingModule::new(4).pad(&y).unwrap();
        assert_eq!(p.dtype(), DType::I64);
        assert_eq!(p.dims(), &[1, 1, 4, 4]);
        assert_eq!(pad.crop(&p).unwrap().flatten_all().unwrap().to_vec1::<i64>().unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn criterion_selection() {
        assert_eq!(default_criterion(1, false, 1).unwrap().name(), "DiceBCELoss");
        assert_eq!(default_criterion(4, false, 1).unwrap().name(), "DiceCELoss");
        let ds = default_criterion(4, true, 3).unwrap();
        assert_eq!(ds.name(), "DeepSupervisionWrapper");
        assert_eq!(crate::loss::full_resolution(ds.as_ref()).name(), "DiceCELoss");
    }

    #[test]
    fn config_defaults() {
        let c = SegmentationConfig::default();
        assert_eq!((c.momentum, c.nesterov, c.clip_norm, c.base_lr, c.padding_divisor), (0.99, true, 12.0, 1e-2, 16));
        c.validate().unwrap();
        let parsed: SegmentationConfig = serde_json::from_str(r#"{"num_classes": 4, "num_dims": 3}"#).unwrap();
        assert_eq!(parsed.num_classes, 4);
        assert_eq!(parsed.momentum, 0.99);
        assert!(SegmentationConfig { num_dims: 4, ..c }.validate().is_err());
    }
}
