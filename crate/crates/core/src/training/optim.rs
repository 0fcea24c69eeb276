//! Optimizers, learning-rate schedules, gradient clipping and parameter
//! averaging.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::numerics::poly_lr;

pub trait Optimizer: Send {
    fn name(&self) -> &str;

    fn lr(&self) -> f64;

    fn set_lr(&mut self, lr: f64);

    fn step(&mut self, grads: &GradStore) -> Result<()>;

    /// Hyper-parameters, for logging and introspection.
    fn config(&self) -> Value;

    /// Internal buffers needed to resume.
    fn state_tensors(&self) -> Result<BTreeMap<String, Tensor>>;

    fn load_state_tensors(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()>;
}

/// Stochastic gradient descent with optional (Nesterov) momentum and L2
/// weight decay. Updates follow the common formulation
/// `b <- m b + g`, `d = g + m b` (Nesterov) or `d = b`, `p <- p - lr d`,
/// with `b = g` on the first step.
pub struct Sgd {
    params: Vec<Param>,
    lr: f64,
    momentum: f64,
    nesterov: bool,
    weight_decay: f64,
    buffers: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(params: &[Param], lr: f64, momentum: f64, nesterov: bool, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0) || !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 {
            return Err(Error::Argument(format!("invalid SGD settings lr={lr} momentum={momentum} weight_decay={weight_decay}")));
        }
        if nesterov && momentum == 0.0 {
            return Err(Error::Argument("Nesterov momentum requires momentum > 0".into()));
        }
        let params: Vec<Param> = params.iter().filter(|p| p.trainable).cloned().collect();
        let buffers = vec![None; params.len()];
        Ok(Self { params, lr, momentum, nesterov, weight_decay, buffers })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn nesterov(&self) -> bool {
        self.nesterov
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }
}

impl Optimizer for Sgd {
    fn name(&self) -> &str {
        "SGD"
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (p, buf) in self.params.iter().zip(self.buffers.iter_mut()) {
            let Some(g) = grads.get(p.var.as_tensor()) else { continue };
            let w = p.var.as_tensor().detach();
            let mut g = g.detach().to_dtype(w.dtype())?;
            if self.weight_decay != 0.0 {
                g = (g + (&w * self.weight_decay)?)?;
            }
            let d = if self.momentum != 0.0 {
                let b = match buf.take() {
                    None => g.clone(),
                    Some(b) => ((b * self.momentum)? + &g)?,
                };
                let d = if self.nesterov { (&g + (&b * self.momentum)?)? } else { b.clone() };
                *buf = Some(b);
                d
            } else {
                g
            };
            p.var.set(&(w - (d * self.lr)?)?)?;
        }
        Ok(())
    }

    fn config(&self) -> Value {
        json!({
            "name": "SGD",
            "lr": self.lr,
            "momentum": self.momentum,
            "nesterov": self.nesterov,
            "weight_decay": self.weight_decay,
        })
    }

    fn state_tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (p, b) in self.params.iter().zip(&self.buffers) {
            if let Some(b) = b {
                out.insert(format!("momentum.{}", p.name), b.copy()?);
            }
        }
        Ok(out)
    }

    fn load_state_tensors(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        for (p, b) in self.params.iter().zip(self.buffers.iter_mut()) {
            *b = match state.get(&format!("momentum.{}", p.name)) {
                Some(t) if t.dims() != p.var.dims() => {
                    return Err(Error::Load(format!("momentum buffer for `{}` has shape {:?}", p.name, t.dims())))
                }
                Some(t) => Some(t.to_dtype(p.var.dtype())?),
                None => None,
            };
        }
        Ok(())
    }
}

/// Learning rate as a function of the 1-based epoch.
pub trait LrScheduler: Send {
    fn lr_at(&self, epoch: usize) -> Result<f64>;

    fn total_epochs(&self) -> usize;

    fn set_total_epochs(&mut self, total: usize);

    fn config(&self) -> Value;
}

/// Polynomial decay stepped once per epoch: epoch `e` trains with
/// `poly_lr(base_lr, e - 1, total_epochs, power)`.
#[derive(Debug, Clone)]
pub struct PolyScheduler {
    pub base_lr: f64,
    pub total_epochs: usize,
    pub power: f64,
}

impl PolyScheduler {
    pub fn new(base_lr: f64, total_epochs: usize) -> Self {
        Self { base_lr, total_epochs, power: 0.9 }
    }
}

impl LrScheduler for PolyScheduler {
    fn lr_at(&self, epoch: usize) -> Result<f64> {
        poly_lr(self.base_lr, epoch.saturating_sub(1), self.total_epochs, self.power)
    }

    fn total_epochs(&self) -> usize {
        self.total_epochs
    }

    fn set_total_epochs(&mut self, total: usize) {
        self.total_epochs = total;
    }

    fn config(&self) -> Value {
        json!({"name": "PolyScheduler", "base_lr": self.base_lr, "total_epochs": self.total_epochs, "power": self.power})
    }
}

/// Global L2 norm of the gradients of `params`.
pub fn grad_norm(params: &[Param], grads: &GradStore) -> Result<f64> {
    let mut sq = 0.0;
    for p in params {
        if let Some(g) = grads.get(p.var.as_tensor()) {
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &[Param], grads: &mut GradStore, max_norm: f64) -> Result<f64> {
    let norm = grad_norm(params, grads)?;
    let coef = max_norm / (norm + 1e-6);
    if coef < 1.0 {
        for p in params {
            if let Some(g) = grads.remove(p.var.as_tensor()) {
                grads.insert(p.var.as_tensor(), (g * coef)?);
            }
        }
    }
    Ok(norm)
}

pub const DEFAULT_EMA_DECAY: f64 = 0.999;

/// `ema <- beta ema + (1 - beta) param` for trainable tensors; buffers are
/// copied. Parameters are matched by name.
pub fn ema_update(ema: &[Param], model: &[Param], beta: f64) -> Result<()> {
    if ema.len() != model.len() {
        return Err(Error::Shape(format!("EMA has {} tensors, model has {}", ema.len(), model.len())));
    }
    for (e, p) in ema.iter().zip(model) {
        if e.name != p.name || e.var.dims() != p.var.dims() {
            return Err(Error::Shape(format!("EMA tensor `{}` does not match model tensor `{}`", e.name, p.name)));
        }
        let current = p.var.as_tensor().detach();
        let next = if p.trainable {
            ((e.var.as_tensor().detach() * beta)? + (current * (1.0 - beta))?)?
        } else {
            current.copy()?
        };
        e.var.set(&next)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn param(name: &str, values: &[f32]) -> Param {
        Param { name: name.into(), var: Var::from_slice(values, values.len(), &Device::Cpu).unwrap(), trainable: true }
    }

    fn values(p: &Param) -> Vec<f32> {
        p.var.as_tensor().to_vec1().unwrap()
    }

    /// Gradient of `sum(w^2) / 2`.
    fn quadratic_grads(p: &Param) -> GradStore {
        let loss = (p.var.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        loss.backward().unwrap()
    }

    #[test]
    fn config_readback() {
        let p = param("w", &[1.0]);
        let opt = Sgd::new(&[p], 0.01, 0.99, true, 0.0).unwrap();
        assert_eq!(opt.momentum(), 0.99);
        assert!(opt.nesterov());
        assert_eq!(opt.config()["momentum"], json!(0.99));
    }

    #[test]
    fn descends_quadratic() {
        let p = param("w", &[1.0]);
        let mut opt = Sgd::new(&[p.clone()], 0.1, 0.99, true, 0.0).unwrap();
        opt.step(&quadratic_grads(&p)).unwrap();
        assert!(values(&p)[0] < 1.0);
    }

    #[test]
    fn nesterov_two_steps_match_recursion() {
        let (lr, m, wd) = (0.1f64, 0.9f64, 0.01f64);
        let p = param("w", &[1.0, -2.0]);
        let mut opt = Sgd::new(&[p.clone()], lr, m, true, wd).unwrap();
        let mut w = [1.0f64, -2.0];
        let mut b: Option<[f64; 2]> = None;
        for _ in 0..2 {
            opt.step(&quadratic_grads(&p)).unwrap();
            let g = [w[0] + wd * w[0], w[1] + wd * w[1]];
            let nb = match b {
                None => g,
                Some(b) => [m * b[0] + g[0], m * b[1] + g[1]],
            };
            w = [w[0] - lr * (g[0] + m * nb[0]), w[1] - lr * (g[1] + m * nb[1])];
            b = Some(nb);
        }
        let got = values(&p);
        assert!((got[0] as f64 - w[0]).abs() < 1e-6 && (got[1] as f64 - w[1]).abs() < 1e-6, "{got:?} vs {w:?}");
        // first step: 1 - 0.1 * (1.01 + 0.9 * 1.01) = 0.8081
        assert!((w[0] - 0.57121561).abs() < 1e-6, "{}", w[0]);
    }

    #[test]
    fn momentum_state_round_trip() {
        let p = param("w", &[0.5, 0.25]);
        let mut a = Sgd::new(&[p.clone()], 0.1, 0.99, true, 0.0).unwrap();
        a.step(&quadratic_grads(&p)).unwrap();
        let state = a.state_tensors().unwrap();
        assert_eq!(state.keys().collect::<Vec<_>>(), ["momentum.w"]);

        let q = param("w", &values(&p));
        let mut b = Sgd::new(&[q.clone()], 0.1, 0.99, true, 0.0).unwrap();
        b.load_state_tensors(&state).unwrap();
        a.step(&quadratic_grads(&p)).unwrap();
        b.step(&quadratic_grads(&q)).unwrap();
        assert_eq!(values(&p), values(&q));
    }

    #[test]
    fn poly_scheduler_per_epoch() {
        let s = PolyScheduler::new(0.01, 10);
        assert_eq!(s.lr_at(1).unwrap(), 0.01);
        assert!((s.lr_at(6).unwrap() - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!(s.lr_at(10).unwrap() > 0.0);
    }

    #[test]
    fn clipping() {
        let p = param("w", &[3.0, 4.0]);
        let mut g = quadratic_grads(&p);
        assert_eq!(clip_grad_norm(&[p.clone()], &mut g, 12.0).unwrap(), 5.0);
        assert_eq!(g.get(p.var.as_tensor()).unwrap().to_vec1::<f32>().unwrap(), vec![3.0, 4.0]);

        let big = param("w", &[300.0, -400.0]);
        let mut g = quadratic_grads(&big);
        let before = g.get(big.var.as_tensor()).unwrap().to_vec1::<f32>().unwrap();
        assert!((clip_grad_norm(&[big.clone()], &mut g, 12.0).unwrap() - 500.0).abs() < 1e-9);
        let after = g.get(big.var.as_tensor()).unwrap().to_vec1::<f32>().unwrap();
        let norm = grad_norm(&[big.clone()], &g).unwrap();
        assert!(norm <= 12.0 + 1e-6 && (norm - 12.0).abs() < 1e-4);
        let dot: f64 = before.iter().zip(&after).map(|(a, b)| (a * b) as f64).sum();
        let cos = dot / (500.0 * norm);
        assert!((cos - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ema_recursion() {
        let model = [param("w", &[2.0, -1.0])];
        for beta in [0.0, 0.5, 0.999, 1.0] {
            let ema = [param("w", &[0.0, 4.0])];
            let k = 7;
            for _ in 0..k {
                ema_update(&ema, &model, beta).unwrap();
            }
            let got = values(&ema[0]);
            for (i, (&e0, &p)) in [0.0f64, 4.0].iter().zip(&[2.0f64, -1.0]).enumerate() {
                let expected = p + beta.powi(k) * (e0 - p);
                assert!((got[i] as f64 - expected).abs() < 1e-5, "beta={beta}");
            }
        }
        let ema = [param("v", &[0.0, 0.0])];
        assert!(ema_update(&ema, &model, 0.5).is_err());
    }

    proptest::proptest! {
        #[test]
        fn clipped_norm_is_bounded(values in proptest::collection::vec(-1e3f32..1e3, 1..24), max_norm in 0.1f64..12.0) {
            let p = param("w", &values);
            let mut g = quadratic_grads(&p);
            clip_grad_norm(&[p.clone()], &mut g, max_norm).unwrap();
            proptest::prop_assert!(grad_norm(&[p], &g).unwrap() <= max_norm + 1e-6);
        }
    }
}
