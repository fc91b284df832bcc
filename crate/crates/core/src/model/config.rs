use serde::{Deserialize, Serialize};

use super::tokens::VOCAB_SIZE;
use super::ModelError;
use crate::layers::{AttnConfig, HybridPattern, DEFAULT_THETA};

fn default_theta() -> f64 {
    DEFAULT_THETA
}

fn default_eps() -> f64 {
    1e-6
}

/// Architecture hyper-parameters. Encoder and decoder share width and head
/// layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    /// Pixels per patch side.
    pub patch_size: usize,
    /// Side of the square patch neighbourhood fused into one visual token.
    pub merge_factor: usize,
    pub max_image_side: usize,
    pub mtp_enabled: bool,
    pub mtp_weight: f64,
    #[serde(default = "default_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_eps")]
    pub rms_eps: f64,
    #[serde(default)]
    pub enc_attention: HybridPattern,
    #[serde(default)]
    pub dec_attention: HybridPattern,
    /// Key/value block size for blockwise attention; dense when absent.
    #[serde(default)]
    pub attn_chunk: Option<usize>,
}

impl ModelConfig {
    /// Small configuration used by tests and gradient checks: width 32, two
    /// encoder and two decoder layers, 4×4-pixel patches.
    pub fn toy() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            d_model: 32,
            n_layers_enc: 2,
            n_layers_dec: 2,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 8,
            mlp_hidden: 64,
            patch_size: 4,
            merge_factor: 2,
            max_image_side: 64,
            mtp_enabled: true,
            mtp_weight: 0.1,
            rope_theta: DEFAULT_THETA,
            rms_eps: 1e-6,
            enc_attention: HybridPattern::default(),
            dec_attention: HybridPattern::default(),
            attn_chunk: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.d_model != self.n_heads * self.head_dim {
            return bad(format!(
                "d_model {} != n_heads {} × head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            ));
        }
        if self.vocab_size < VOCAB_SIZE {
            return bad(format!("vocab_size must be at least {VOCAB_SIZE}"));
        }
        if self.head_dim % 4 != 0 {
            return bad("head_dim must be divisible by 4 for 2D RoPE".into());
        }
        if self.patch_size == 0 || self.merge_factor == 0 || self.mlp_hidden == 0 {
            return bad("patch_size, merge_factor and mlp_hidden must be positive".into());
        }
        if !(self.mtp_weight >= 0.0 && self.mtp_weight.is_finite()) {
            return bad(format!(
                "mtp_weight must be non-negative, got {}",
                self.mtp_weight
            ));
        }
        if !(self.rms_eps >= 0.0) {
            return bad("rms_eps must be non-negative".into());
        }
        if self.attn_chunk == Some(0) {
            return bad("attn_chunk must be at least 1".into());
        }
        self.attn(true, None).validate()?;
        Ok(())
    }

    pub fn attn(&self, causal: bool, window: Option<usize>) -> AttnConfig {
        AttnConfig {
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim,
            causal,
            window,
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// Visual tokens produced for an image of the given size.
    pub fn visual_tokens(&self, height: usize, width: usize) -> usize {
        let side = self.patch_size * self.merge_factor;
        (height / side) * (width / side)
    }
}
