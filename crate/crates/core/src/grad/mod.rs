//! Minimal deterministic reverse-mode differentiation over dense `f64`
//! tensors: the tape, parameter storage with checkpoints, and optimizers.

mod gemm;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{Adam, Sgd};
pub use params::{ParamSet, RunningStats};
pub use tape::{cab_weights, BnMode, Tape, Var, BN_EPS, BN_MOMENTUM, SOFT_HSS_FLOOR};
pub use tensor::{Tensor, MAX_RANK};

pub(crate) use params::ByteReader;
pub(crate) use tape::soft_level_row;
#[cfg(test)]
pub(crate) use tape::sigmoid;

#[cfg(test)]
mod tests;
