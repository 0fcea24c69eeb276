//! Deferred layer configuration.
//!
//! A [`LayerDescriptor`] pairs a constructible layer type ([`LayerKind`])
//! with stored keyword arguments. Nothing is instantiated until
//! [`LayerDescriptor::assemble`] is called, so one descriptor can be
//! assembled any number of times with different call-time arguments:
//!
//! ```
//! use medseg::layer::{LayerDescriptor, BATCH_NORM2D, CONV2D, RELU};
//! use medseg::{args, kwargs};
//!
//! let conv = LayerDescriptor::new(CONV2D);
//! let norm = LayerDescriptor::new(BATCH_NORM2D).with("num_features", "in_ch");
//! let act = LayerDescriptor::new(RELU).with("inplace", true);
//!
//! let conv = conv.assemble(&args![64, 128, 3], &kwargs! {"padding" => 1}).unwrap();
//! let norm = norm.assemble(&[], &kwargs! {"in_ch" => 128}).unwrap();
//! let act = act.assemble(&[], &kwargs! {}).unwrap();
//! assert_eq!(norm.config()["num_features"], 128.into());
//! # let _ = (conv, act);
//! ```
//!
//! A stored string value that names a call-time keyword argument is a
//! *deferred parameter*: it is replaced by that argument's value, and the
//! argument itself is consumed. The tokens in [`DEFERRED_TOKENS`] must always
//! be resolved at assembly time.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Module, Sequential};

/// Placeholder names that must be bound when a descriptor is assembled.
pub const DEFERRED_TOKENS: &[&str] = &["in_ch", "out_ch"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArgValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl fmt::Display for ArgValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArgValue::Bool(v) => write!(f, "{v}"),
            ArgValue::Int(v) => write!(f, "{v}"),
            ArgValue::Float(v) => write!(f, "{v}"),
            ArgValue::Str(v) => write!(f, "{v:?}"),
        }
    }
}

macro_rules! arg_from {
    ($variant:ident: $($t:ty),+) => {
        $(impl From<$t> for ArgValue {
            fn from(v: $t) -> Self {
                ArgValue::$variant(v.into())
            }
        })+
    };
}

arg_from!(Bool: bool);
arg_from!(Int: i32, i64, u8, u32);
arg_from!(Float: f32, f64);
arg_from!(Str: &str, String);

impl From<usize> for ArgValue {
    fn from(v: usize) -> Self {
        ArgValue::Int(v as i64)
    }
}

pub type Kwargs = BTreeMap<String, ArgValue>;

/// Builds a [`Kwargs`] map: `kwargs! {"padding" => 1, "bias" => false}`.
#[macro_export]
macro_rules! kwargs {
    () => { $crate::layer::Kwargs::new() };
    ($($key:expr => $value:expr),+ $(,)?) => {{
        let mut map = $crate::layer::Kwargs::new();
        $(map.insert(::std::string::String::from($key), $crate::layer::ArgValue::from($value));)+
        map
    }};
}

/// Builds a positional argument list: `args![64, 128, 3]`.
#[macro_export]
macro_rules! args {
    ($($value:expr),* $(,)?) => {
        vec![$($crate::layer::ArgValue::from($value)),*]
    };
}

/// Default value of a constructor argument.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArgDefault {
    Required,
    Bool(bool),
    Int(i64),
    Float(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct ArgSpec {
    pub name: &'static str,
    pub default: ArgDefault,
}

pub const fn required(name: &'static str) -> ArgSpec {
    ArgSpec { name, default: ArgDefault::Required }
}

pub const fn optional(name: &'static str, default: ArgDefault) -> ArgSpec {
    ArgSpec { name, default }
}

pub type BuildFn = fn(&BoundArgs) -> Result<Box<dyn Module>>;

/// A constructible layer type: name, ordered constructor signature and
/// build function. User code can declare its own kinds with
/// [`LayerKind::new`].
#[derive(Clone, Copy)]
pub struct LayerKind {
    name: &'static str,
    signature: &'static [ArgSpec],
    build: BuildFn,
}

impl fmt::Debug for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name)
    }
}

impl PartialEq for LayerKind {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && std::ptr::fn_addr_eq(self.build, other.build)
    }
}

impl LayerKind {
    pub const fn new(name: &'static str, signature: &'static [ArgSpec], build: BuildFn) -> Self {
        Self { name, signature, build }
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn signature(&self) -> &'static [ArgSpec] {
        self.signature
    }

    /// Binds positional and keyword arguments against the signature, the
    /// way a Python call would, and fills in defaults.
    pub fn bind(&self, positional: &[ArgValue], kwargs: &Kwargs) -> Result<BoundArgs> {
        let reject = |msg: String| Error::Config(format!("{}: {msg}", self.name));
        if positional.len() > self.signature.len() {
            return Err(reject(format!(
                "takes at most {} positional arguments but {} were given",
                self.signature.len(),
                positional.len()
            )));
        }
        let mut values = Kwargs::new();
        for (spec, value) in self.signature.iter().zip(positional) {
            values.insert(spec.name.to_string(), value.clone());
        }
        for (key, value) in kwargs {
            if !self.signature.iter().any(|s| s.name == key) {
                return Err(reject(format!("unexpected keyword argument `{key}`")));
            }
            if values.insert(key.clone(), value.clone()).is_some() {
                return Err(reject(format!("got multiple values for argument `{key}`")));
            }
        }
        for spec in self.signature {
            if values.contains_key(spec.name) {
                continue;
            }
            let value = match spec.default {
                ArgDefault::Required => {
                    return Err(reject(format!("missing required argument `{}`", spec.name)))
                }
                ArgDefault::Bool(v) => ArgValue::Bool(v),
                ArgDefault::Int(v) => ArgValue::Int(v),
                ArgDefault::Float(v) => ArgValue::Float(v),
            };
            values.insert(spec.name.to_string(), value);
        }
        Ok(BoundArgs { kind: self.name, values })
    }

    pub fn construct(&self, positional: &[ArgValue], kwargs: &Kwargs) -> Result<Box<dyn Module>> {
        let bound = self.bind(positional, kwargs)?;
        (self.build)(&bound).map_err(|e| match e {
            Error::Config(msg) if msg.starts_with(self.name) => Error::Config(msg),
            other => Error::Config(format!("{}: {other}", self.name)),
        })
    }
}

/// Fully bound constructor arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundArgs {
    kind: &'static str,
    values: Kwargs,
}

impl BoundArgs {
    pub fn get(&self, name: &str) -> Option<&ArgValue> {
        self.values.get(name)
    }

    fn value(&self, name: &str) -> Result<&ArgValue> {
        self.values
            .get(name)
            .ok_or_else(|| Error::Config(format!("{}: argument `{name}` is not bound", self.kind)))
    }

    fn type_error(&self, name: &str, expected: &str, got: &ArgValue) -> Error {
        Error::Config(format!("{}: argument `{name}` must be {expected}, got {got}", self.kind))
    }

    pub fn i64(&self, name: &str) -> Result<i64> {
        match self.value(name)? {
            ArgValue::Int(v) => Ok(*v),
            other => Err(self.type_error(name, "an integer", other)),
        }
    }

    pub fn usize(&self, name: &str) -> Result<usize> {
        let v = self.i64(name)?;
        usize::try_from(v).map_err(|_| self.type_error(name, "non-negative", &ArgValue::Int(v)))
    }

    pub fn positive(&self, name: &str) -> Result<usize> {
        match self.usize(name)? {
            0 => Err(self.type_error(name, "positive", &ArgValue::Int(0))),
            v => Ok(v),
        }
    }

    pub fn f64(&self, name: &str) -> Result<f64> {
        match self.value(name)? {
            ArgValue::Float(v) => Ok(*v),
            ArgValue::Int(v) => Ok(*v as f64),
            other => Err(self.type_error(name, "a number", other)),
        }
    }

    pub fn bool(&self, name: &str) -> Result<bool> {
        match self.value(name)? {
            ArgValue::Bool(v) => Ok(*v),
            other => Err(self.type_error(name, "a boolean", other)),
        }
    }

    pub fn to_kwargs(&self) -> Kwargs {
        self.values.clone()
    }
}

/// A layer type plus stored keyword arguments, instantiated on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDescriptor {
    kind: LayerKind,
    stored: Kwargs,
}

impl LayerDescriptor {
    pub fn new(kind: LayerKind) -> Self {
        Self { kind, stored: Kwargs::new() }
    }

    pub fn with(mut self, name: impl Into<String>, value: impl Into<ArgValue>) -> Self {
        self.stored.insert(name.into(), value.into());
        self
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn stored(&self) -> &Kwargs {
        &self.stored
    }

    /// Whether any stored value is the deferred token `token`.
    pub fn references(&self, token: &str) -> bool {
        self.stored.values().any(|v| matches!(v, ArgValue::Str(s) if s == token))
    }

    /// Merged keyword arguments for an assembly with `call` keyword
    /// arguments: deferred tokens are substituted, and call-time values win
    /// on key collisions.
    pub fn resolve(&self, call: &Kwargs) -> Result<Kwargs> {
        let mut merged = Kwargs::new();
        let mut consumed = Vec::new();
        for (key, value) in &self.stored {
            let value = match value {
                ArgValue::Str(token) if call.contains_key(token) => {
                    consumed.push(token.as_str());
                    call[token].clone()
                }
                ArgValue::Str(token) if DEFERRED_TOKENS.contains(&token.as_str()) => {
                    return Err(Error::Config(format!(
                        "{}: deferred parameter `{token}` (for `{key}`) was not provided at assembly",
                        self.kind.name()
                    )));
                }
                other => other.clone(),
            };
            merged.insert(key.clone(), value);
        }
        for (key, value) in call {
            if !consumed.contains(&key.as_str()) {
                merged.insert(key.clone(), value.clone());
            }
        }
        Ok(merged)
    }

    pub fn assemble(&self, positional: &[ArgValue], call: &Kwargs) -> Result<Box<dyn Module>> {
        let merged = self.resolve(call)?;
        self.kind.construct(positional, &merged)
    }
}

use ArgDefault::{Bool as B, Float as F, Int as I};

const CONV_SIGNATURE: &[ArgSpec] = &[
    required("in_channels"),
    required("out_channels"),
    required("kernel_size"),
    optional("stride", I(1)),
    optional("padding", I(0)),
    optional("bias", B(true)),
];
const BATCH_NORM_SIGNATURE: &[ArgSpec] = &[
    required("num_features"),
    optional("eps", F(1e-5)),
    optional("momentum", F(0.1)),
    optional("affine", B(true)),
];
const INSTANCE_NORM_SIGNATURE: &[ArgSpec] =
    &[required("num_features"), optional("eps", F(1e-5)), optional("affine", B(false))];
const GROUP_NORM_SIGNATURE: &[ArgSpec] = &[
    required("num_groups"),
    required("num_channels"),
    optional("eps", F(1e-5)),
    optional("affine", B(true)),
];
const INPLACE_SIGNATURE: &[ArgSpec] = &[optional("inplace", B(false))];
const LEAKY_SIGNATURE: &[ArgSpec] = &[optional("negative_slope", F(0.01)), optional("inplace", B(false))];
const GELU_SIGNATURE: &[ArgSpec] = &[];
const LINEAR_SIGNATURE: &[ArgSpec] =
    &[required("in_features"), required("out_features"), optional("bias", B(true))];

fn boxed<M: Module + 'static>(m: Result<M>) -> Result<Box<dyn Module>> {
    m.map(|m| Box::new(m) as Box<dyn Module>)
}

pub const CONV2D: LayerKind = LayerKind::new("Conv2d", CONV_SIGNATURE, |a| boxed(nn::Conv::from_args(2, a)));
pub const CONV3D: LayerKind = LayerKind::new("Conv3d", CONV_SIGNATURE, |a| boxed(nn::Conv::from_args(3, a)));
pub const CONV_TRANSPOSE2D: LayerKind =
    LayerKind::new("ConvTranspose2d", CONV_SIGNATURE, |a| boxed(nn::ConvTranspose::from_args(2, a)));
pub const CONV_TRANSPOSE3D: LayerKind =
    LayerKind::new("ConvTranspose3d", CONV_SIGNATURE, |a| boxed(nn::ConvTranspose::from_args(3, a)));
pub const BATCH_NORM2D: LayerKind =
    LayerKind::new("BatchNorm2d", BATCH_NORM_SIGNATURE, |a| boxed(nn::BatchNorm::from_args(2, a)));
pub const BATCH_NORM3D: LayerKind =
    LayerKind::new("BatchNorm3d", BATCH_NORM_SIGNATURE, |a| boxed(nn::BatchNorm::from_args(3, a)));
pub const INSTANCE_NORM2D: LayerKind =
    LayerKind::new("InstanceNorm2d", INSTANCE_NORM_SIGNATURE, |a| boxed(nn::GroupNorm::instance(2, a)));
pub const INSTANCE_NORM3D: LayerKind =
    LayerKind::new("InstanceNorm3d", INSTANCE_NORM_SIGNATURE, |a| boxed(nn::GroupNorm::instance(3, a)));
pub const GROUP_NORM: LayerKind =
    LayerKind::new("GroupNorm", GROUP_NORM_SIGNATURE, |a| boxed(nn::GroupNorm::from_args(a)));
pub const RELU: LayerKind = LayerKind::new("ReLU", INPLACE_SIGNATURE, |a| boxed(nn::Activation::relu(a)));
pub const LEAKY_RELU: LayerKind =
    LayerKind::new("LeakyReLU", LEAKY_SIGNATURE, |a| boxed(nn::Activation::leaky_relu(a)));
pub const GELU: LayerKind = LayerKind::new("GELU", GELU_SIGNATURE, |a| boxed(nn::Activation::gelu(a)));
pub const SIGMOID: LayerKind = LayerKind::new("Sigmoid", GELU_SIGNATURE, |a| boxed(nn::Activation::sigmoid(a)));
pub const TANH: LayerKind = LayerKind::new("Tanh", GELU_SIGNATURE, |a| boxed(nn::Activation::tanh(a)));
pub const IDENTITY: LayerKind =
    LayerKind::new("Identity", GELU_SIGNATURE, |a| boxed(nn::Activation::identity(a)));
pub const LINEAR: LayerKind = LayerKind::new("Linear", LINEAR_SIGNATURE, |a| boxed(nn::Linear::from_args(a)));

/// Convolution, normalization and activation descriptors for a conv block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockSpec {
    pub conv: LayerDescriptor,
    pub norm: LayerDescriptor,
    pub act: LayerDescriptor,
}

impl ConvBlockSpec {
    /// Conv2d + BatchNorm2d + ReLU.
    pub fn default_2d() -> Self {
        Self {
            conv: LayerDescriptor::new(CONV2D),
            norm: LayerDescriptor::new(BATCH_NORM2D).with("num_features", "in_ch"),
            act: LayerDescriptor::new(RELU).with("inplace", true),
        }
    }

    /// Conv3d + BatchNorm3d + ReLU.
    pub fn default_3d() -> Self {
        Self {
            conv: LayerDescriptor::new(CONV3D),
            norm: LayerDescriptor::new(BATCH_NORM3D).with("num_features", "in_ch"),
            act: LayerDescriptor::new(RELU).with("inplace", true),
        }
    }

    pub fn for_dims(dims: usize) -> Result<Self> {
        match dims {
            2 => Ok(Self::default_2d()),
            3 => Ok(Self::default_3d()),
            d => Err(Error::Config(format!("conv blocks support 2 or 3 spatial dims, got {d}"))),
        }
    }

    pub fn with_norm(mut self, norm: LayerDescriptor) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_act(mut self, act: LayerDescriptor) -> Self {
        self.act = act;
        self
    }

    pub fn with_conv(mut self, conv: LayerDescriptor) -> Self {
        self.conv = conv;
        self
    }
}

/// Channel count a normalization layer was configured for, if it declares one.
fn norm_channels(config: &Kwargs) -> Option<i64> {
    ["num_features", "num_channels"].iter().find_map(|k| match config.get(*k) {
        Some(ArgValue::Int(v)) => Some(*v),
        _ => None,
    })
}

/// Builds `conv -> norm -> act`. The normalization descriptor receives the
/// output channel count through its `in_ch` deferred parameter; extra
/// keyword arguments go to the convolution.
pub fn build_conv_block(
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    spec: &ConvBlockSpec,
    extra: &Kwargs,
) -> Result<Sequential> {
    if in_ch == 0 || out_ch == 0 {
        return Err(Error::Config(format!("conv block channels must be positive, got {in_ch} -> {out_ch}")));
    }
    let conv = spec.conv.assemble(&crate::args![in_ch, out_ch, kernel], extra)?;
    let mut norm_call = Kwargs::new();
    for (token, value) in [("in_ch", out_ch), ("out_ch", out_ch)] {
        if spec.norm.references(token) {
            norm_call.insert(token.to_string(), ArgValue::from(value));
        }
    }
    let norm = spec.norm.assemble(&[], &norm_call)?;
    let conv_out = match conv.config().get("out_channels") {
        Some(ArgValue::Int(v)) => Some(*v),
        _ => None,
    };
    if let (Some(produced), Some(expected)) = (conv_out, norm_channels(&norm.config())) {
        if produced != expected {
            return Err(Error::Config(format!(
                "channel mismatch: {} produces {produced} channels but {} expects {expected}",
                conv.kind(),
                norm.kind()
            )));
        }
    }
    let act = spec.act.assemble(&[], &Kwargs::new())?;
    let mut block = Sequential::new();
    block.push_named("conv", conv);
    block.push_named("norm", norm);
    block.push_named("act", act);
    Ok(block)
}
