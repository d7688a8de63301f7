//! Candidate operations for each searchable block.
//!
//! All three map `[N, F, H, W]` to `[N, F, H, W]`, so any path through the
//! supernet is well-formed.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{BnMode, ParamSet, Tape, Var};
use crate::layers;

/// Regularizer inside the channel-aware energy denominator.
pub const CAB_LAMBDA: f64 = 1e-4;

/// Kernel size of the space-aware block's attention convolution.
pub const SAB_KERNEL: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "RB")]
    Rb,
    #[serde(rename = "SAB")]
    Sab,
    #[serde(rename = "CAB")]
    Cab,
}

impl OpKind {
    /// Candidate order; indexes the columns of the architecture logits.
    pub const ALL: [OpKind; 3] = [OpKind::Rb, OpKind::Sab, OpKind::Cab];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<OpKind> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Rb => "RB",
            OpKind::Sab => "SAB",
            OpKind::Cab => "CAB",
        }
    }

    fn tag(self) -> &'static str {
        match self {
            OpKind::Rb => "rb",
            OpKind::Sab => "sab",
            OpKind::Cab => "cab",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RB" => Ok(OpKind::Rb),
            "SAB" => Ok(OpKind::Sab),
            "CAB" => Ok(OpKind::Cab),
            _ => Err(Error::Parse(format!("unknown operation {s:?}"))),
        }
    }
}

/// Parameter-name prefix of `kind` inside block `block`.
pub fn param_prefix(block: usize, kind: OpKind) -> String {
    format!("block{block}.{}", kind.tag())
}

/// Registers the learnable tensors of one candidate operation.
pub fn init_op<R: Rng + ?Sized>(params: &mut ParamSet, block: usize, kind: OpKind, features: usize, rng: &mut R) {
    let p = param_prefix(block, kind);
    match kind {
        OpKind::Rb => {
            layers::init_conv(params, &format!("{p}.conv1"), features, features, 3, rng);
            layers::init_bn(params, &format!("{p}.bn1"), features);
            layers::init_conv(params, &format!("{p}.conv2"), features, features, 3, rng);
            layers::init_bn(params, &format!("{p}.bn2"), features);
        }
        OpKind::Sab => layers::init_conv(params, &format!("{p}.conv"), 1, 2, SAB_KERNEL, rng),
        OpKind::Cab => {}
    }
}

/// Residual block: `relu(z + bn(conv(relu(bn(conv(z))))))`.
pub fn rb_forward(tape: &mut Tape, z: Var, params: &mut ParamSet, prefix: &str, mode: BnMode) -> Result<Var> {
    let h = layers::conv(tape, params, &format!("{prefix}.conv1"), z)?;
    let h = layers::bn(tape, params, &format!("{prefix}.bn1"), h, mode)?;
    let h = tape.relu(h);
    let h = layers::conv(tape, params, &format!("{prefix}.conv2"), h)?;
    let h = layers::bn(tape, params, &format!("{prefix}.bn2"), h, mode)?;
    let s = tape.add(z, h)?;
    Ok(tape.relu(s))
}

/// Space-aware block: a spatial gate from the channel mean and max maps,
/// `z * sigmoid(conv7x7([mean_c z, max_c z]))`.
pub fn sab_forward(tape: &mut Tape, z: Var, params: &ParamSet, prefix: &str) -> Result<Var> {
    let pooled = tape.channel_pool(z)?;
    let logits = layers::conv(tape, params, &format!("{prefix}.conv"), pooled)?;
    let gate = tape.sigmoid(logits);
    tape.gate(z, gate)
}

/// Channel-aware block; parameter-free.
pub fn cab_forward(tape: &mut Tape, z: Var, lambda: f64) -> Result<Var> {
    tape.cab(z, lambda)
}

/// Runs candidate `kind` of block `block`.
pub fn op_forward(tape: &mut Tape, kind: OpKind, block: usize, z: Var, params: &mut ParamSet, mode: BnMode) -> Result<Var> {
    let prefix = param_prefix(block, kind);
    match kind {
        OpKind::Rb => rb_forward(tape, z, params, &prefix, mode),
        OpKind::Sab => sab_forward(tape, z, params, &prefix),
        OpKind::Cab => cab_forward(tape, z, CAB_LAMBDA),
    }
}
