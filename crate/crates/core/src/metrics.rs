//! Dice-family metrics on boolean masks, class maps, one-hot and soft
//! probability tensors.
//!
//! All variants use `(2 |A ∩ B| + eps) / (|A| + |B| + eps)`, so two empty
//! masks score exactly 1.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

pub const DICE_EPS: f64 = 1e-5;

fn dice_from_counts(intersection: f64, pred: f64, label: f64, eps: f64) -> f64 {
    (2.0 * intersection + eps) / (pred + label + eps)
}

pub fn binary_dice(pred: &[bool], label: &[bool], eps: f64) -> Result<f64> {
    if pred.len() != label.len() {
        return Err(Error::Argument(format!("mask sizes differ: {} vs {}", pred.len(), label.len())));
    }
    let (mut inter, mut p, mut l) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(label) {
        inter += usize::from(a && b);
        p += usize::from(a);
        l += usize::from(b);
    }
    Ok(dice_from_counts(inter as f64, p as f64, l as f64, eps))
}

fn check_classes(values: &[i64], num_classes: usize, what: &str) -> Result<()> {
    if let Some(bad) = values.iter().find(|&&v| v < 0 || v >= num_classes as i64) {
        return Err(Error::Argument(format!("{what} contains class {bad}, outside [0, {num_classes})")));
    }
    Ok(())
}

/// Per-class Dice of two class maps, classes `0..num_classes`.
pub fn dice_similarity_coefficient(pred: &[i64], label: &[i64], num_classes: usize, eps: f64) -> Result<Vec<f64>> {
    if pred.len() != label.len() {
        return Err(Error::Argument(format!("class map sizes differ: {} vs {}", pred.len(), label.len())));
    }
    check_classes(pred, num_classes, "prediction")?;
    check_classes(label, num_classes, "label")?;
    let mut inter = vec![0usize; num_classes];
    let mut p = vec![0usize; num_classes];
    let mut l = vec![0usize; num_classes];
    for (&a, &b) in pred.iter().zip(label) {
        p[a as usize] += 1;
        l[b as usize] += 1;
        if a == b {
            inter[a as usize] += 1;
        }
    }
    Ok((0..num_classes).map(|c| dice_from_counts(inter[c] as f64, p[c] as f64, l[c] as f64, eps)).collect())
}

/// Tensor front end for [`dice_similarity_coefficient`].
pub fn class_map_dice(pred: &Tensor, label: &Tensor, num_classes: usize) -> Result<Vec<f64>> {
    if pred.dims() != label.dims() {
        return Err(Error::Argument(format!("shapes differ: {:?} vs {:?}", pred.dims(), label.dims())));
    }
    let p = pred.flatten_all()?.to_dtype(DType::I64)?.to_vec1::<i64>()?;
    let l = label.flatten_all()?.to_dtype(DType::I64)?.to_vec1::<i64>()?;
    dice_similarity_coefficient(&p, &l, num_classes, DICE_EPS)
}

/// Per-class Dice of crisp one-hot tensors `(B, C, ...)`.
pub fn one_hot_dice(pred: &Tensor, label: &Tensor, eps: f64) -> Result<Vec<f64>> {
    if pred.dims() != label.dims() || pred.rank() < 2 {
        return Err(Error::Argument(format!("shapes differ: {:?} vs {:?}", pred.dims(), label.dims())));
    }
    let c = pred.dim(1)?;
    let flat = |t: &Tensor| -> Result<Tensor> { Ok(t.to_dtype(DType::F64)?.transpose(0, 1)?.contiguous()?.reshape((c, ()))?) };
    let (p, l) = (flat(pred)?, flat(label)?);
    let inter = (&p * &l)?.sum(1)?.to_vec1::<f64>()?;
    let ps = p.sum(1)?.to_vec1::<f64>()?;
    let ls = l.sum(1)?.to_vec1::<f64>()?;
    Ok((0..c).map(|k| dice_from_counts(inter[k], ps[k], ls[k], eps)).collect())
}

/// Differentiable Dice of probabilities against a one-hot target, both
/// `(B, C, ...)`: the mean over classes of per-class Dice computed over the
/// whole batch. Returns a scalar tensor.
pub fn soft_dice(prob: &Tensor, target: &Tensor, eps: f64) -> Result<Tensor> {
    if prob.dims() != target.dims() || prob.rank() < 2 {
        return Err(Error::Argument(format!(
            "soft dice needs equal (B, C, ...) shapes, got {:?} and {:?}",
            prob.dims(),
            target.dims()
        )));
    }
    let sum_but_classes = |t: &Tensor| -> Result<Tensor> {
        let c = t.dim(1)?;
        Ok(t.transpose(0, 1)?.contiguous()?.reshape((c, ()))?.sum(1)?)
    };
    let target = target.to_dtype(prob.dtype())?;
    let inter = sum_but_classes(&(prob * &target)?)?;
    let denom = (sum_but_classes(prob)? + sum_but_classes(&target)?)?;
    let per_class = ((inter * 2.0)? + eps)?.div(&(denom + eps)?)?;
    Ok(per_class.mean_all()?)
}
