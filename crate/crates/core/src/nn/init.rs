//! Seedable parameter initialization.
//!
//! Layers draw their initial weights from a thread-local generator so that
//! module construction needs no extra context. Call [`manual_seed`] before
//! building a network to make its initial weights reproducible.

use std::cell::RefCell;

use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

thread_local! {
    static INIT_RNG: RefCell<ChaCha8Rng> = RefCell::new(ChaCha8Rng::seed_from_u64(0));
}

pub fn manual_seed(seed: u64) {
    INIT_RNG.with(|r| *r.borrow_mut() = ChaCha8Rng::seed_from_u64(seed));
}

pub fn uniform(shape: &[usize], bound: f64) -> Result<Var> {
    let n: usize = shape.iter().product();
    let values: Vec<f32> = INIT_RNG.with(|r| {
        let mut rng = r.borrow_mut();
        (0..n)
            .map(|_| rng.random_range(-bound..=bound) as f32)
            .collect()
    });
    Ok(Var::from_vec(values, shape, &Device::Cpu)?)
}

pub fn constant(shape: &[usize], value: f32) -> Result<Var> {
    Ok(Var::from_tensor(&Tensor::full(value, shape, &Device::Cpu)?)?)
}

/// He-uniform weights for ReLU networks: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize) -> Result<Var> {
    uniform(shape, (6.0 / fan_in.max(1) as f64).sqrt())
}
