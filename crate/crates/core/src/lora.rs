//! Low-rank adapters gated per token by modality.
//!
//! An adapter adds `(alpha / r) * down * up` to a base weight, but only on rows
//! whose gate is 1. Gates come from the token modality (condition tokens only),
//! so text and noisy-image tokens always see the untouched base weights.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Modality;
use crate::error::{dim_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Standard deviation of the `down` factor at initialization.
pub const DOWN_INIT_STD: f64 = 0.02;

/// Which per-block weight an adapter modifies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    WQ,
    WK,
    WV,
    WO,
    NormScale,
    NormShift,
    MlpIn,
    MlpOut,
}

impl Binding {
    pub const ALL: [Binding; 8] = [
        Binding::WQ,
        Binding::WK,
        Binding::WV,
        Binding::WO,
        Binding::NormScale,
        Binding::NormShift,
        Binding::MlpIn,
        Binding::MlpOut,
    ];

    /// Attention projections and the attention-input norm affine.
    pub const DEFAULT: [Binding; 6] = [
        Binding::WQ,
        Binding::WK,
        Binding::WV,
        Binding::WO,
        Binding::NormScale,
        Binding::NormShift,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Binding::WQ => "w_q",
            Binding::WK => "w_k",
            Binding::WV => "w_v",
            Binding::WO => "w_o",
            Binding::NormScale => "norm_scale",
            Binding::NormShift => "norm_shift",
            Binding::MlpIn => "w_mlp_in",
            Binding::MlpOut => "w_mlp_out",
        }
    }

    /// `(d_in, d_out)` of the adapted weight. Norm bindings act on the `[1, d]`
    /// affine vectors of the attention-input layer norm.
    pub fn shape(self, d_model: usize, d_hidden: usize) -> (usize, usize) {
        match self {
            Binding::NormScale | Binding::NormShift => (1, d_model),
            Binding::MlpIn => (d_model, d_hidden),
            Binding::MlpOut => (d_hidden, d_model),
            _ => (d_model, d_model),
        }
    }
}

impl fmt::Display for Binding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Binding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Binding::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown adapter binding {s:?}")))
    }
}

/// Adapter location: block index plus binding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AdapterKey {
    pub block: usize,
    pub binding: Binding,
}

impl AdapterKey {
    pub fn new(block: usize, binding: Binding) -> Self {
        Self { block, binding }
    }

    pub fn param_name(&self, factor: &str) -> String {
        format!("lora.{}.{}.{factor}", self.block, self.binding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub down: Arc<Tensor>,
    pub up: Arc<Tensor>,
    pub rank: usize,
    pub alpha: f64,
    pub enabled: bool,
}

impl LoraAdapter {
    /// Gaussian `down`, zero `up`: a fresh adapter is an exact no-op.
    pub fn init<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        let adapter = Self {
            down: Arc::new(Tensor::randn(&[d_in, rank], DOWN_INIT_STD, rng)),
            up: Arc::new(Tensor::zeros(&[rank, d_out])),
            rank,
            alpha,
            enabled: true,
        };
        if let Some(w) = adapter.capacity_warning() {
            log::warn!("{w}");
        }
        Ok(adapter)
    }

    pub fn from_factors(down: Tensor, up: Tensor, alpha: f64) -> Result<Self> {
        let (_, r) = down.matrix_dims()?;
        let (r2, _) = up.matrix_dims()?;
        if r != r2 || r == 0 {
            return dim_err(format!(
                "adapter factors {:?} and {:?} disagree on rank",
                down.shape(),
                up.shape()
            ));
        }
        Ok(Self {
            down: Arc::new(down),
            up: Arc::new(up),
            rank: r,
            alpha,
            enabled: true,
        })
    }

    pub fn d_in(&self) -> usize {
        self.down.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.up.shape()[1]
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.d_in() + self.d_out())
    }

    /// Set when the rank cannot be lower than a full-rank update.
    pub fn capacity_warning(&self) -> Option<String> {
        let full = self.d_in().min(self.d_out());
        (self.rank >= full).then(|| {
            format!(
                "adapter rank {} is not below min(d_in, d_out) = {full}",
                self.rank
            )
        })
    }

    /// Dense `(alpha / r) * down * up`.
    pub fn delta(&self) -> Result<Tensor> {
        Ok(self.down.matmul(&self.up)?.scale(self.scale()))
    }
}

/// Per-token gate, 1 for condition tokens and 0 otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct GatePolicy {
    gates: Arc<[f64]>,
}

impl GatePolicy {
    pub fn from_modalities(modalities: &[Modality]) -> Self {
        Self {
            gates: modalities
                .iter()
                .map(|&m| if m == Modality::CondImage { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// Gates for `n_plain` non-condition rows followed by `n_cond` condition rows.
    pub fn split(n_plain: usize, n_cond: usize) -> Self {
        Self {
            gates: std::iter::repeat(0.0)
                .take(n_plain)
                .chain(std::iter::repeat(1.0).take(n_cond))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    pub fn any_open(&self) -> bool {
        self.gates.iter().any(|&g| g != 0.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.gates
    }

    pub(crate) fn shared(&self) -> Arc<[f64]> {
        self.gates.clone()
    }
}

/// `x_t * base_w + gate_t * (alpha / r) * x_t * down * up` for every row `t`.
pub fn lora_forward(
    x: &Tensor,
    base_w: &Tensor,
    adapter: &LoraAdapter,
    gates: &GatePolicy,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(base_w.clone());
    let base = tape.matmul(xv, wv)?;
    let vars = AdapterVars::constant(&mut tape, adapter);
    let out = apply_delta(&mut tape, xv, base, Some(&vars), gates)?;
    Ok(tape.value(out).clone())
}

/// Adapter factors registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub down: Var,
    pub up: Var,
    pub scale: f64,
}

impl AdapterVars {
    pub fn constant(tape: &mut Tape, a: &LoraAdapter) -> Self {
        Self {
            down: tape.shared(a.down.clone(), false),
            up: tape.shared(a.up.clone(), false),
            scale: a.scale(),
        }
    }

    /// The dense delta `(alpha / r) * down * up` on the tape.
    pub fn delta(&self, tape: &mut Tape) -> Result<Var> {
        let d = tape.matmul(self.down, self.up)?;
        tape.scale(d, self.scale)
    }
}

/// Adds the gated low-rank term for input `x` onto `base`. No-op when the
/// adapter is absent or every gate is closed.
pub fn apply_delta(
    tape: &mut Tape,
    x: Var,
    base: Var,
    adapter: Option<&AdapterVars>,
    gates: &GatePolicy,
) -> Result<Var> {
    let Some(a) = adapter else { return Ok(base) };
    if !gates.any_open() {
        return Ok(base);
    }
    if gates.len() != tape.value(x).rows() {
        return dim_err(format!(
            "{} gates for {} rows",
            gates.len(),
            tape.value(x).rows()
        ));
    }
    let h = tape.matmul(x, a.down)?;
    let h = tape.row_scale(h, gates.shared())?;
    let h = tape.matmul(h, a.up)?;
    let h = tape.scale(h, a.scale)?;
    tape.add(base, h)
}

/// Installed adapters keyed by block and binding.
pub type AdapterSet = BTreeMap<AdapterKey, LoraAdapter>;

/// Parameter accounting for a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub lora_params: usize,
    pub base_params: usize,
    pub ratio: f64,
}
