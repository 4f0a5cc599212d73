use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::Binding;
use crate::rope::{check_head_dim, PositionMode, DEFAULT_ROPE_BASE};

/// How the condition image reaches the denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integration {
    /// Condition tokens appended to the attention sequence.
    UnifiedSequence,
    /// Condition features added to the image hidden states at every block input.
    FeatureAdding,
    /// Condition ignored.
    None,
}

/// Which blocks receive adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterDepth {
    Full,
    /// Dual-stream blocks only.
    EarlyOnly,
}

fn default_bindings() -> Vec<Binding> {
    Binding::DEFAULT.to_vec()
}

/// Missing fields take their [`Default`] values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_dual_blocks: usize,
    pub n_single_blocks: usize,
    pub mlp_ratio: usize,
    pub vocab: usize,
    pub text_len: usize,
    /// Width of the text-token features before the input projection.
    pub text_dim: usize,
    pub time_freq_dim: usize,
    pub rope_base: f64,
    pub lora_rank: usize,
    /// Adapter scale numerator; defaults to the rank.
    pub lora_alpha: Option<f64>,
    pub adapter_bindings: Vec<Binding>,
    pub adapter_depth: AdapterDepth,
    pub integration: Integration,
    pub position_mode: PositionMode,
    /// Scale on added condition features for [`Integration::FeatureAdding`].
    pub feature_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            d_model: 64,
            n_heads: 4,
            n_dual_blocks: 2,
            n_single_blocks: 2,
            mlp_ratio: 4,
            vocab: 32,
            text_len: 4,
            text_dim: 256,
            time_freq_dim: 256,
            rope_base: DEFAULT_ROPE_BASE,
            lora_rank: 4,
            lora_alpha: None,
            adapter_bindings: default_bindings(),
            adapter_depth: AdapterDepth::Full,
            integration: Integration::UnifiedSequence,
            position_mode: PositionMode::Aligned,
            feature_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image size {} is not a positive multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            ));
        }
        check_head_dim(self.d_head(), self.rope_base)?;
        if self.channels == 0 || self.patch_dim() > self.d_model {
            return fail(format!(
                "patch dimension {} must be in 1..=d_model ({})",
                self.patch_dim(),
                self.d_model
            ));
        }
        if self.mlp_ratio == 0 || self.vocab == 0 || self.text_dim == 0 {
            return fail("mlp_ratio, vocab and text_dim must be positive".into());
        }
        if self.time_freq_dim == 0 || self.time_freq_dim % 2 != 0 {
            return fail(format!("time_freq_dim {} must be even", self.time_freq_dim));
        }
        if self.lora_rank == 0 {
            return fail("lora_rank must be at least 1".into());
        }
        if let Some(a) = self.lora_alpha {
            if !a.is_finite() {
                return fail("lora_alpha must be finite".into());
            }
        }
        if !self.feature_scale.is_finite() {
            return fail("feature_scale must be finite".into());
        }
        if self.integration == Integration::FeatureAdding
            && self.position_mode != PositionMode::Aligned
        {
            return fail("feature adding requires aligned positions".into());
        }
        let mut seen = self.adapter_bindings.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.adapter_bindings.len() {
            return fail("duplicate adapter binding".into());
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn d_hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn grid(&self) -> u32 {
        (self.image_size / self.patch_size) as u32
    }

    pub fn n_tokens(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn n_blocks(&self) -> usize {
        self.n_dual_blocks + self.n_single_blocks
    }

    pub fn alpha(&self) -> f64 {
        self.lora_alpha.unwrap_or(self.lora_rank as f64)
    }

    /// Blocks that carry adapters under the configured depth.
    pub fn adapted_blocks(&self) -> std::ops::Range<usize> {
        match self.adapter_depth {
            AdapterDepth::Full => 0..self.n_blocks(),
            AdapterDepth::EarlyOnly => 0..self.n_dual_blocks,
        }
    }
}
