//! Parameter initialization and named-layer helpers shared by the blocks.

use rand::Rng;

use crate::error::Result;
use crate::grad::{BnMode, ParamSet, RunningStats, Tape, Tensor, Var, BN_EPS};

/// Uniform in `±sqrt(6 / fan_in)`.
pub fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Registers `{name}.weight` `[cout, cin, k, k]` and `{name}.bias` `[cout]`.
pub fn init_conv<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, cout: usize, cin: usize, k: usize, rng: &mut R) {
    let fan_in = cin * k * k;
    params.insert(format!("{name}.weight"), kaiming_uniform(&[cout, cin, k, k], fan_in, rng).with_grad());
    params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]).with_grad());
}

/// Registers batch-norm affine parameters (1, 0) and fresh running stats.
pub fn init_bn(params: &mut ParamSet, name: &str, channels: usize) {
    params.insert(format!("{name}.gamma"), Tensor::full(&[channels], 1.0).with_grad());
    params.insert(format!("{name}.beta"), Tensor::zeros(&[channels]).with_grad());
    params.insert_stats(name, RunningStats::new(channels));
}

/// Registers `{name}.weight` `[din, dout]` and `{name}.bias` `[dout]`.
pub fn init_linear<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, din: usize, dout: usize, rng: &mut R) {
    params.insert(format!("{name}.weight"), kaiming_uniform(&[din, dout], din, rng).with_grad());
    params.insert(format!("{name}.bias"), Tensor::zeros(&[dout]).with_grad());
}

/// Same-padded stride-1 convolution.
pub fn conv(tape: &mut Tape, params: &ParamSet, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{name}.weight"))?;
    let b = tape.param(params, &format!("{name}.bias"))?;
    let k = tape.value(w).shape()[2];
    tape.conv2d(x, w, b, 1, k / 2)
}

pub fn bn(tape: &mut Tape, params: &mut ParamSet, name: &str, x: Var, mode: BnMode) -> Result<Var> {
    let g = tape.param(params, &format!("{name}.gamma"))?;
    let b = tape.param(params, &format!("{name}.beta"))?;
    let stats = params.stats_mut(name)?;
    tape.batchnorm2d(x, g, b, stats, mode, BN_EPS)
}

pub fn linear(tape: &mut Tape, params: &ParamSet, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{name}.weight"))?;
    let b = tape.param(params, &format!("{name}.bias"))?;
    tape.linear(x, w, b)
}
