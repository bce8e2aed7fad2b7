//! The spatio-temporal CRF: factor bank, rotary tables, and the mean-field
//! update loop that plays the role of a transformer forward pass.

pub mod bank;
pub mod mfvi;
pub mod rope;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StptError};

/// Normalizer applied to latent scores when refreshing Z beliefs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZNormalizer {
    Softmax,
    SquaredSoftmax,
    LayerNorm,
}

/// Static shape and behavior of one CRF model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of channels N.
    pub n_channels: usize,
    /// Steps per patch p.
    pub patch_len: usize,
    /// Patches per window P.
    pub n_patches: usize,
    /// Label-space width d.
    pub d: usize,
    /// Topic FFN hidden width.
    pub d_ff: usize,
    /// Ternary heads per axis C.
    pub n_heads: usize,
    /// Mean-field iterations K.
    pub k_iters: usize,
    /// Forecast horizon in steps.
    pub pred_len: usize,
    /// Pairwise-belief softmax temperature.
    #[serde(default = "default_lambda_h")]
    pub lambda_h: f64,
    /// Initial damping weight on the refreshed beliefs.
    #[serde(default = "default_alpha_init")]
    pub alpha_init: f64,
    #[serde(default = "default_normalizer")]
    pub z_normalizer: ZNormalizer,
    /// Rotary position phases on temporal scores.
    #[serde(default = "default_true")]
    pub rope_time: bool,
    /// Rotary phases on channel scores.
    #[serde(default = "default_true")]
    pub rope_chan: bool,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

fn default_lambda_h() -> f64 {
    1.0
}
fn default_alpha_init() -> f64 {
    0.5
}
fn default_normalizer() -> ZNormalizer {
    ZNormalizer::Softmax
}
fn default_true() -> bool {
    true
}
fn default_rope_base() -> f64 {
    10_000.0
}

impl ModelConfig {
    /// Small default used by unit tests; experiment configs override.
    pub fn tiny(n_channels: usize, n_patches: usize) -> Self {
        Self {
            n_channels,
            patch_len: 4,
            n_patches,
            d: 8,
            d_ff: 8,
            n_heads: 2,
            k_iters: 2,
            pred_len: 8,
            lambda_h: 1.0,
            alpha_init: 0.5,
            z_normalizer: ZNormalizer::Softmax,
            rope_time: true,
            rope_chan: true,
            rope_base: 10_000.0,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.n_patches * self.patch_len
    }

    pub fn d_head(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(StptError::InvalidConfig(msg));
        if self.n_channels == 0 || self.n_patches == 0 || self.patch_len == 0 {
            return err("channel, patch count, and patch length must be positive".into());
        }
        if self.d == 0 || self.d_ff == 0 || self.n_heads == 0 || self.k_iters == 0 {
            return err("d, d_ff, heads, and iterations must be positive".into());
        }
        if self.d % self.n_heads != 0 {
            return err(format!("d = {} not divisible by heads = {}", self.d, self.n_heads));
        }
        if (self.rope_time || self.rope_chan) && self.d_head() % 2 != 0 {
            return err(format!(
                "rotary phases need an even head width, got d_head = {}",
                self.d_head()
            ));
        }
        if !(self.alpha_init > 0.0 && self.alpha_init < 1.0) {
            return err(format!("alpha_init must lie in (0, 1), got {}", self.alpha_init));
        }
        if self.lambda_h <= 0.0 {
            return err(format!("lambda_h must be positive, got {}", self.lambda_h));
        }
        Ok(())
    }
}
