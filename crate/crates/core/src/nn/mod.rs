//! Neural building blocks on top of `candle_core` tensors.
//!
//! Every layer owns its parameters as [`Var`]s so that modules can be built
//! on demand (see [`crate::layer`]) without a separate variable store.
//! Layers expose their full constructor configuration through
//! [`Module::config`], which makes assembled modules introspectable.

mod activation;
mod conv;
pub mod init;
mod linear;
mod norm;

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt;

use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::layer::Kwargs;

pub use activation::Activation;
pub(crate) use activation::sigmoid;
pub use conv::{Conv, ConvTranspose};
pub use linear::Linear;
pub use norm::{BatchNorm, GroupNorm};

/// A named tensor owned by a module. Buffers (e.g. running statistics) are
/// reported with `trainable == false` and never receive gradients.
#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
    pub trainable: bool,
}

impl fmt::Debug for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Param")
            .field("name", &self.name)
            .field("shape", &self.var.dims())
            .field("trainable", &self.trainable)
            .finish()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A single-input, single-output layer.
pub trait Module: Send + Sync {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor>;

    /// Layer type name, e.g. `"Conv2d"`.
    fn kind(&self) -> &str;

    /// The complete argument set the module was constructed with.
    fn config(&self) -> Kwargs {
        Kwargs::new()
    }

    fn collect_params(&self, _prefix: &str, _out: &mut Vec<Param>) {}

    fn children(&self) -> Vec<&dyn Module> {
        Vec::new()
    }
}

impl fmt::Debug for dyn Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.kind())?;
        for (i, (k, v)) in self.config().iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{k}={v}")?;
        }
        write!(f, ")")
    }
}

/// A top-level model. Networks may emit several outputs (deep supervision);
/// the first one is always at full input resolution.
pub trait Network: Send + Sync {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Vec<Tensor>>;

    fn collect_params(&self, out: &mut Vec<Param>);

    /// Number of tensors returned by `forward_t`.
    fn num_outputs(&self) -> usize {
        1
    }

    /// Structural description used for logging and config comparisons.
    fn describe(&self) -> serde_json::Value {
        serde_json::Value::Null
    }

    fn params(&self) -> Vec<Param> {
        let mut out = Vec::new();
        self.collect_params(&mut out);
        out
    }
}

/// Adapts a [`Module`] into a single-output [`Network`].
pub struct SingleOutput(pub Box<dyn Module>);

impl Network for SingleOutput {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        Ok(vec![self.0.forward_t(xs, train)?])
    }

    fn collect_params(&self, out: &mut Vec<Param>) {
        self.0.collect_params("", out)
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::Value::String(format!("{:?}", self.0.as_ref()))
    }
}

pub fn single(module: impl Module + 'static) -> Box<dyn Network> {
    Box::new(SingleOutput(Box::new(module)))
}

/// Runs child modules in order.
#[derive(Default)]
pub struct Sequential {
    layers: Vec<(String, Box<dyn Module>)>,
}

impl fmt::Debug for Sequential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.layers.iter().map(|(_, m)| m.as_ref())).finish()
    }
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: Box<dyn Module>) {
        let name = self.layers.len().to_string();
        self.layers.push((name, layer));
    }

    pub fn push_named(&mut self, name: impl Into<String>, layer: Box<dyn Module>) {
        self.layers.push((name.into(), layer));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&dyn Module> {
        self.layers.get(index).map(|(_, l)| l.as_ref())
    }
}

impl Module for Sequential {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let mut xs = xs.clone();
        for (_, layer) in &self.layers {
            xs = layer.forward_t(&xs, train)?;
        }
        Ok(xs)
    }

    fn kind(&self) -> &str {
        "Sequential"
    }

    fn collect_params(&self, prefix: &str, out: &mut Vec<Param>) {
        for (name, layer) in &self.layers {
            layer.collect_params(&join(prefix, name), out);
        }
    }

    fn children(&self) -> Vec<&dyn Module> {
        self.layers.iter().map(|(_, l)| l.as_ref()).collect()
    }
}

/// Number of trainable scalars.
pub fn param_count(params: &[Param]) -> usize {
    params.iter().filter(|p| p.trainable).map(|p| p.var.elem_count()).sum()
}

/// Snapshot of all parameter and buffer values, keyed by name.
pub fn state_dict(params: &[Param]) -> Result<BTreeMap<String, Tensor>> {
    params
        .iter()
        .map(|p| Ok((p.name.clone(), p.var.as_tensor().copy()?)))
        .collect()
}

/// Copies `state[prefix + name]` into every parameter. All parameters must be
/// present with matching shapes.
pub fn load_state_dict(
    params: &[Param],
    state: &BTreeMap<String, Tensor>,
    prefix: &str,
) -> Result<()> {
    for p in params {
        let key = format!("{prefix}{}", p.name);
        let value = state
            .get(&key)
            .ok_or_else(|| Error::Load(format!("missing tensor `{key}`")))?;
        if value.dims() != p.var.dims() {
            return Err(Error::Load(format!(
                "tensor `{key}` has shape {:?}, expected {:?}",
                value.dims(),
                p.var.dims()
            )));
        }
        let value = value.to_dtype(p.var.dtype())?.to_device(p.var.device())?;
        p.var.set(&value)?;
    }
    Ok(())
}

thread_local! {
    static MAC_COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

pub(crate) fn record_macs(macs: u64) {
    MAC_COUNTER.with(|c| {
        if let Some(total) = c.get() {
            c.set(Some(total + macs));
        }
    });
}

/// Runs `f` while counting multiply-accumulates of convolution and affine
/// layers executed on this thread.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let previous = MAC_COUNTER.with(|c| c.replace(Some(0)));
    let out = f();
    let macs = MAC_COUNTER.with(|c| c.replace(previous)).unwrap_or(0);
    if let Some(outer) = previous {
        MAC_COUNTER.with(|c| c.set(Some(outer + macs)));
    }
    (out, macs)
}

/// Reshape helper: `(1, C, 1, ...)` for broadcasting per-channel vectors over
/// a tensor of the given rank.
pub(crate) fn channel_shape(channels: usize, rank: usize) -> Vec<usize> {
    let mut shape = vec![1; rank];
    shape[1] = channels;
    shape
}

pub(crate) fn check_input(kind: &str, xs: &Tensor, rank: usize, channels: usize) -> Result<()> {
    if xs.rank() != rank || xs.dim(1)? != channels {
        return Err(Error::Shape(format!(
            "{kind} expects input of rank {rank} with {channels} channels, got {:?}",
            xs.dims()
        )));
    }
    Ok(())
}
