//! Token-level image conditioning for a toy diffusion transformer.
//!
//! Condition images are encoded by the model's own patch codec and appended to
//! the multi-modal attention sequence next to the text and noisy-image tokens.
//! Only low-rank adapters gated onto the condition tokens are trained, so the
//! frozen base model's behaviour on text and image tokens is untouched.

pub mod attention;
pub mod checkpoint;
pub mod compare;
pub mod error;
pub mod eval;
pub mod flow;
pub mod lora;
pub mod model;
pub mod rope;
pub mod tape;
pub mod tasks;
pub mod tensor;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
