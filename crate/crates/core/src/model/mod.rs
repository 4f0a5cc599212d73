//! The toy diffusion transformer: patch codec, text/timestep conditioning,
//! dual-stream and single-stream blocks, and the condition integration modes.

mod codec;
mod config;
mod dit;

use rand::Rng;

pub use codec::PatchCodec;
pub use config::{AdapterDepth, Integration, ModelConfig};
pub use dit::{base_param_shapes, Dit, ForwardInput, ForwardTrace, InitScheme, ParamBinder, Trainable};

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Dense affine layer `x * w + b` with `w: [d_in, d_out]`, `b: [d_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn random<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            w: Tensor::randn(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng),
            b: Tensor::randn(&[d_out], 0.1, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.constant(self.w.clone());
        let b = tape.constant(self.b.clone());
        let h = tape.matmul(x, w)?;
        tape.add_row(h, b)
    }
}
