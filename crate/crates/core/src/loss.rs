//! Training criteria: combined Dice + cross-entropy and the
//! deep-supervision wrapper.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::metrics::{soft_dice, DICE_EPS};
use crate::nn::sigmoid;

/// A scalar loss tensor plus named scalar components for logging.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub total: Tensor,
    pub terms: BTreeMap<String, f64>,
}

impl LossValue {
    pub fn value(&self) -> Result<f64> {
        Ok(self.total.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

/// Loss between network output(s) and an integer label map `(B, 1, ...)`.
pub trait Criterion: Send + Sync {
    fn name(&self) -> &str;

    fn compute(&self, output: &Tensor, target: &Tensor) -> Result<LossValue>;

    /// Loss for a network returning several outputs. Single-output
    /// criteria accept exactly one.
    fn compute_outputs(&self, outputs: &[Tensor], target: &Tensor) -> Result<LossValue> {
        match outputs {
            [single] => self.compute(single, target),
            _ => Err(Error::Argument(format!("{} expects 1 output, got {}", self.name(), outputs.len()))),
        }
    }

    /// The wrapped criterion, for wrappers.
    fn inner(&self) -> Option<&dyn Criterion> {
        None
    }
}

/// The innermost criterion, applied to full-resolution output only.
pub fn full_resolution(criterion: &dyn Criterion) -> &dyn Criterion {
    let mut c = criterion;
    while let Some(inner) = c.inner() {
        c = inner;
    }
    c
}

/// `(B, 1, ...)` class indices to a `(B, C, ...)` one-hot tensor.
pub fn one_hot(target: &Tensor, num_classes: usize, dtype: DType) -> Result<Tensor> {
    let target = target.to_dtype(DType::I64)?;
    let (min, max) = (target.min_all()?.to_scalar::<i64>()?, target.max_all()?.to_scalar::<i64>()?);
    if min < 0 || max >= num_classes as i64 {
        return Err(Error::Argument(format!(
            "target contains class {} but the criterion has {num_classes} classes",
            if min < 0 { min } else { max }
        )));
    }
    let mut shape = vec![1; target.rank()];
    shape[1] = num_classes;
    let classes = Tensor::arange(0i64, num_classes as i64, target.device())?.reshape(shape)?;
    Ok(target.broadcast_eq(&classes)?.to_dtype(dtype)?)
}

fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Dice + cross-entropy. One class selects the binary form (logistic
/// output, binary cross-entropy); more classes select softmax with
/// categorical cross-entropy. Both terms default to unit weight.
#[derive(Debug, Clone)]
pub struct DiceCeLoss {
    num_classes: usize,
    dice_weight: f64,
    ce_weight: f64,
    eps: f64,
}

impl DiceCeLoss {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Argument("num_classes must be at least 1".into()));
        }
        Ok(Self { num_classes, dice_weight: 1.0, ce_weight: 1.0, eps: DICE_EPS })
    }

    pub fn with_weights(mut self, dice_weight: f64, ce_weight: f64) -> Self {
        self.dice_weight = dice_weight;
        self.ce_weight = ce_weight;
        self
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_binary(&self) -> bool {
        self.num_classes == 1
    }

    /// Returns `(dice_term, ce_term)`, i.e. `1 - soft_dice` and the mean cross-entropy.
    pub fn terms(&self, logits: &Tensor, target: &Tensor) -> Result<(Tensor, Tensor)> {
        let expected = if self.is_binary() { 1 } else { self.num_classes };
        if logits.rank() < 3 || logits.dim(1)? != expected || target.rank() != logits.rank() || target.dims()[2..] != logits.dims()[2..] {
            return Err(Error::Shape(format!(
                "loss expects logits (B, {expected}, ...) and target (B, 1, ...) of equal spatial size, got {:?} and {:?}",
                logits.dims(),
                target.dims()
            )));
        }
        if self.is_binary() {
            let t = one_hot(target, 2, logits.dtype())?.narrow(1, 1, 1)?;
            // max(x, 0) - x t + log(1 + exp(-|x|))
            let bce = (logits.relu()? - (logits * &t)?)? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
            let dice = soft_dice(&sigmoid(logits)?, &t, self.eps)?;
            Ok(((dice.neg()? + 1.0)?, bce?.mean_all()?))
        } else {
            let t = one_hot(target, self.num_classes, logits.dtype())?;
            let logp = log_softmax(logits)?;
            let ce = (&logp * &t)?.sum(1)?.mean_all()?.neg()?;
            let dice = soft_dice(&logp.exp()?, &t, self.eps)?;
            Ok(((dice.neg()? + 1.0)?, ce))
        }
    }
}

impl Criterion for DiceCeLoss {
    fn name(&self) -> &str {
        if self.is_binary() {
            "DiceBCELoss"
        } else {
            "DiceCELoss"
        }
    }

    fn compute(&self, output: &Tensor, target: &Tensor) -> Result<LossValue> {
        let (dice, ce) = self.terms(output, target)?;
        let total = ((&dice * self.dice_weight)? + (&ce * self.ce_weight)?)?;
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let terms = BTreeMap::from([("dice".to_string(), scalar(&dice)?), ("ce".to_string(), scalar(&ce)?)]);
        Ok(LossValue { total, terms })
    }
}

/// Nearest-neighbour resize of a label map to `spatial` (index `j * L / l`).
pub fn downsample_nearest(target: &Tensor, spatial: &[usize]) -> Result<Tensor> {
    let mut t = target.clone();
    for (a, &len) in spatial.iter().enumerate() {
        let src = t.dim(a + 2)?;
        if src == len {
            continue;
        }
        let idx: Vec<u32> = (0..len).map(|j| (j * src / len) as u32).collect();
        t = t.index_select(&Tensor::new(idx.as_slice(), &Device::Cpu)?.to_device(t.device())?, a + 2)?;
    }
    Ok(t)
}

/// Applies a criterion to every output of a multi-scale network against a
/// correspondingly downsampled target and sums the losses with weights.
/// The default weights are `2^-i`, normalized to sum to one.
pub struct DeepSupervisionWrapper {
    inner: Box<dyn Criterion>,
    weights: Vec<f64>,
}

impl DeepSupervisionWrapper {
    pub fn new(inner: Box<dyn Criterion>, num_scales: usize) -> Result<Self> {
        if num_scales == 0 {
            return Err(Error::Argument("deep supervision needs at least one scale".into()));
        }
        let raw: Vec<f64> = (0..num_scales).map(|i| 0.5f64.powi(i as i32)).collect();
        let sum: f64 = raw.iter().sum();
        Ok(Self { inner, weights: raw.iter().map(|w| w / sum).collect() })
    }

    /// Uses `weights` as given, without normalization.
    pub fn with_weights(inner: Box<dyn Criterion>, weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Argument("deep supervision needs at least one weight".into()));
        }
        Ok(Self { inner, weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl Criterion for DeepSupervisionWrapper {
    fn name(&self) -> &str {
        "DeepSupervisionWrapper"
    }

    fn compute(&self, output: &Tensor, target: &Tensor) -> Result<LossValue> {
        self.compute_outputs(std::slice::from_ref(output), target)
    }

    fn compute_outputs(&self, outputs: &[Tensor], target: &Tensor) -> Result<LossValue> {
        if outputs.len() != self.weights.len() {
            return Err(Error::Argument(format!(
                "deep supervision expects {} outputs, got {}",
                self.weights.len(),
                outputs.len()
            )));
        }
        let mut total: Option<Tensor> = None;
        let mut terms = BTreeMap::new();
        for (out, &w) in outputs.iter().zip(&self.weights) {
            let t = downsample_nearest(target, &out.dims()[2..])?;
            let loss = self.inner.compute(out, &t)?;
            let weighted = (loss.total * w)?;
            total = Some(match total {
                None => weighted,
                Some(acc) => (acc + weighted)?,
            });
            for (k, v) in loss.terms {
                *terms.entry(k).or_insert(0.0) += w * v;
            }
        }
        Ok(LossValue { total: total.expect("at least one output"), terms })
    }

    fn inner(&self) -> Option<&dyn Criterion> {
        Some(self.inner.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;

    fn logits(c: usize, seed: u64) -> Vec<f64> {
        (0..c * 2 * 9).map(|i| (((i as u64 + seed) * 2654435761 % 1000) as f64 / 250.0) - 2.0).collect()
    }

    fn labels(c: usize) -> Tensor {
        let v: Vec<i64> = (0..18).map(|i| (i * 5 % 7) as i64 % c.max(2) as i64).collect();
        Tensor::from_vec(v, (2, 1, 3, 3), &Device::Cpu).unwrap()
    }

    /// Scalar re-implementation of both terms.
    fn oracle(x: &[f64], c: usize, y: &[i64]) -> f64 {
        let n = 9;
        let b = 2;
        if c == 1 {
            let mut bce = 0.0;
            let (mut inter, mut ps, mut ts) = (0.0, 0.0, 0.0);
            for i in 0..b * n {
                let t = y[i] as f64;
                let p = 1.0 / (1.0 + (-x[i]).exp());
                bce += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
                inter += p * t;
                ps += p;
                ts += t;
            }
            (1.0 - (2.0 * inter + DICE_EPS) / (ps + ts + DICE_EPS)) + bce / (b * n) as f64
        } else {
            let mut ce = 0.0;
            let mut inter = vec![0.0; c];
            let mut ps = vec![0.0; c];
            let mut ts = vec![0.0; c];
            for bi in 0..b {
                for i in 0..n {
                    let z: Vec<f64> = (0..c).map(|k| x[(bi * c + k) * n + i]).collect();
                    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
                    let label = y[bi * n + i] as usize;
                    for k in 0..c {
                        let p = (z[k] - m).exp() / s;
                        let t = (k == label) as u8 as f64;
                        inter[k] += p * t;
                        ps[k] += p;
                        ts[k] += t;
                    }
                    ce -= (z[label] - m) - s.ln();
                }
            }
            let dice: f64 = (0..c).map(|k| (2.0 * inter[k] + DICE_EPS) / (ps[k] + ts[k] + DICE_EPS)).sum::<f64>() / c as f64;
            (1.0 - dice) + ce / (b * n) as f64
        }
    }

    #[test]
    fn loss_matches_independent_terms() {
        for c in [1, 3] {
            let x = logits(c, 3);
            let y = labels(c);
            let t = Tensor::from_vec(x.clone(), (2, c, 3, 3), &Device::Cpu).unwrap();
            let loss = DiceCeLoss::new(c).unwrap().compute(&t, &y).unwrap();
            let expected = oracle(&x, c, &y.flatten_all().unwrap().to_vec1().unwrap());
            assert!((loss.value().unwrap() - expected).abs() < 1e-10, "{c}");
            assert!((loss.terms["dice"] + loss.terms["ce"] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn binary_variant_for_one_class() {
        assert_eq!(DiceCeLoss::new(1).unwrap().name(), "DiceBCELoss");
        assert_eq!(DiceCeLoss::new(4).unwrap().name(), "DiceCELoss");
    }

    #[test]
    fn perfect_logits_drive_loss_to_zero() {
        let y = labels(3);
        let oh = one_hot(&y, 3, DType::F64).unwrap();
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 40.0] {
            let l = DiceCeLoss::new(3).unwrap().compute(&(&oh * margin).unwrap(), &y).unwrap().value().unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn out_of_range_class_is_argument_error() {
        let x = Tensor::zeros((1, 2, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let y = Tensor::full(2i64, (1, 1, 2, 2), &Device::Cpu).unwrap();
        assert!(matches!(DiceCeLoss::new(2).unwrap().compute(&x, &y), Err(Error::Argument(_))));
        let x1 = Tensor::zeros((1, 1, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(DiceCeLoss::new(1).unwrap().compute(&x1, &y), Err(Error::Argument(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for c in [1, 3] {
            let x = logits(c, 11);
            let y = labels(c);
            let crit = DiceCeLoss::new(c).unwrap();
            let var = Var::from_vec(x.clone(), (2, c, 3, 3), &Device::Cpu).unwrap();
            let g = crit.compute(var.as_tensor(), &y).unwrap().total.backward().unwrap();
            let g = g.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for i in (0..x.len()).step_by(5) {
                let f = |d: f64| {
                    let mut v = x.clone();
                    v[i] += d;
                    let t = Tensor::from_vec(v, (2, c, 3, 3), &Device::Cpu).unwrap();
                    crit.compute(&t, &y).unwrap().value().unwrap()
                };
                let fd = (f(1e-6) - f(-1e-6)) / 2e-6;
                assert!((g[i] - fd).abs() <= 1e-4 * fd.abs().max(1e-4), "c={c} i={i}: {} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn three_scale_weights() {
        let w = DeepSupervisionWrapper::new(Box::new(DiceCeLoss::new(1).unwrap()), 3).unwrap();
        assert_eq!(w.weights(), &[4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]);
    }

    #[test]
    fn single_scale_is_identity() {
        let base = DiceCeLoss::new(2).unwrap();
        let wrapped = DeepSupervisionWrapper::new(Box::new(base.clone()), 1).unwrap();
        let x = Tensor::from_vec(logits(2, 1), (2, 2, 3, 3), &Device::Cpu).unwrap();
        let y = labels(2);
        let a = base.compute(&x, &y).unwrap().value().unwrap();
        let b = wrapped.compute_outputs(&[x], &y).unwrap().value().unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn weighted_sum_of_scales() {
        let base = DiceCeLoss::new(1).unwrap();
        let wrapped = DeepSupervisionWrapper::new(Box::new(base.clone()), 2).unwrap();
        let y = Tensor::from_vec((0..32).map(|i| (i % 3 == 0) as i64).collect::<Vec<_>>(), (2, 1, 4, 4), &Device::Cpu).unwrap();
        let x0 = Tensor::from_vec((0..32).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>(), (2, 1, 4, 4), &Device::Cpu).unwrap();
        let x1 = Tensor::from_vec((0..8).map(|i| (i as f64 * 0.91).cos()).collect::<Vec<_>>(), (2, 1, 2, 2), &Device::Cpu).unwrap();
        let y1 = downsample_nearest(&y, &[2, 2]).unwrap();
        assert_eq!(y1.flatten_all().unwrap().to_vec1::<i64>().unwrap(), vec![1, 0, 0, 0, 0, 1, 1, 0]);
        let expected = 2.0 / 3.0 * base.compute(&x0, &y).unwrap().value().unwrap()
            + 1.0 / 3.0 * base.compute(&x1, &y1).unwrap().value().unwrap();
        let got = wrapped.compute_outputs(&[x0, x1], &y).unwrap().value().unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn scaling_weights_scales_loss() {
        let y = labels(2);
        let outs = [
            Tensor::from_vec(logits(2, 4), (2, 2, 3, 3), &Device::Cpu).unwrap(),
            Tensor::from_vec(logits(2, 9), (2, 2, 3, 3), &Device::Cpu).unwrap(),
        ];
        let loss = |w: Vec<f64>| {
            DeepSupervisionWrapper::with_weights(Box::new(DiceCeLoss::new(2).unwrap()), w)
                .unwrap()
                .compute_outputs(&outs, &y)
                .unwrap()
                .value()
                .unwrap()
        };
        assert!((loss(vec![1.5, 0.75]) - 3.0 * loss(vec![0.5, 0.25])).abs() < 1e-12);
    }

    #[test]
    fn output_count_mismatch() {
        let w = DeepSupervisionWrapper::new(Box::new(DiceCeLoss::new(1).unwrap()), 3).unwrap();
        let x = Tensor::zeros((1, 1, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let y = Tensor::zeros((1, 1, 2, 2), DType::I64, &Device::Cpu).unwrap();
        assert!(matches!(w.compute_outputs(&[x], &y), Err(Error::Argument(_))));
        assert_eq!(full_resolution(&w).name(), "DiceBCELoss");
    }

    #[test]
    fn perfect_outputs_at_every_scale() {
        let base = DiceCeLoss::new(2).unwrap();
        let y = Tensor::from_vec((0..16).map(|i| (i % 4 < 2) as i64).collect::<Vec<_>>(), (1, 1, 4, 4), &Device::Cpu).unwrap();
        let perfect = |t: &Tensor| (one_hot(t, 2, DType::F64).unwrap() * 60.0).unwrap();
        let outs = [perfect(&y), perfect(&downsample_nearest(&y, &[2, 2]).unwrap())];
        let w = DeepSupervisionWrapper::new(Box::new(base.clone()), 2).unwrap().compute_outputs(&outs, &y).unwrap();
        let b = base.compute(&outs[0], &y).unwrap();
        assert!((w.value().unwrap() - b.value().unwrap()).abs() < 1e-12);
    }
}
