use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkern::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    EncoderDecoder,
    DecoderOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Rms,
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    RelativeBucketBias,
    LearnedAbsolute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnScale {
    None,
    InvSqrtD,
}

/// Hyper-parameters of a bundle, stored verbatim as `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub activation: Activation,
    pub norm: NormKind,
    pub norm_eps: f32,
    pub position_mode: PositionMode,
    pub rel_buckets: usize,
    pub rel_max_distance: usize,
    pub attn_scale: AttnScale,
    pub tied_embeddings: bool,
    /// Decoder start token (encoder-decoder) or BOS (decoder-only).
    #[serde(default)]
    pub start_token_id: u32,
    /// Rows of `pos.embedding`; only meaningful for learned absolute positions.
    #[serde(default)]
    pub max_positions: usize,
}

impl ModelConfig {
    /// Small T5-flavoured defaults; callers override what they need.
    pub fn t5_like(vocab_size: usize, d_model: usize, n_heads: usize, n_layers: usize) -> Self {
        Self {
            arch: Arch::EncoderDecoder,
            n_layers_enc: n_layers,
            n_layers_dec: n_layers,
            n_heads,
            d_model,
            d_head: d_model / n_heads.max(1),
            d_ff: 2 * d_model,
            vocab_size,
            activation: Activation::Relu,
            norm: NormKind::Rms,
            norm_eps: 1e-6,
            position_mode: PositionMode::RelativeBucketBias,
            rel_buckets: 32,
            rel_max_distance: 128,
            attn_scale: AttnScale::None,
            tied_embeddings: true,
            start_token_id: 0,
            max_positions: 0,
        }
    }

    /// Small GPT-2-flavoured defaults.
    pub fn gpt2_like(vocab_size: usize, d_model: usize, n_heads: usize, n_layers: usize) -> Self {
        Self {
            arch: Arch::DecoderOnly,
            n_layers_enc: 0,
            n_layers_dec: n_layers,
            n_heads,
            d_model,
            d_head: d_model / n_heads.max(1),
            d_ff: 4 * d_model,
            vocab_size,
            activation: Activation::GeluTanh,
            norm: NormKind::Standard,
            norm_eps: 1e-5,
            position_mode: PositionMode::LearnedAbsolute,
            rel_buckets: 0,
            rel_max_distance: 0,
            attn_scale: AttnScale::InvSqrtD,
            tied_embeddings: true,
            start_token_id: 0,
            max_positions: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 {
            return bad("d_model and n_heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "D not divisible by H (d_model={}, n_heads={})",
                self.d_model, self.n_heads
            ));
        }
        if self.d_head * self.n_heads != self.d_model {
            return bad(format!(
                "d_head {} x n_heads {} != d_model {}",
                self.d_head, self.n_heads, self.d_model
            ));
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.d_ff == 0 {
            return bad("d_ff must be positive".into());
        }
        if self.arch == Arch::DecoderOnly && self.n_layers_enc != 0 {
            return bad("decoder_only requires n_layers_enc = 0".into());
        }
        if !(self.norm_eps >= 0.0 && self.norm_eps.is_finite()) {
            return bad(format!("norm_eps {} must be finite and >= 0", self.norm_eps));
        }
        if self.start_token_id as usize >= self.vocab_size {
            return bad(format!("start_token_id {} out of range", self.start_token_id));
        }
        match self.position_mode {
            PositionMode::RelativeBucketBias => {
                // bidirectional buckets split in half, then half again for the exact range
                if self.rel_buckets < 4 {
                    return bad(format!("rel_buckets {} < 4", self.rel_buckets));
                }
                if self.rel_max_distance <= self.rel_buckets / 2 {
                    return bad(format!(
                        "rel_max_distance {} must exceed rel_buckets/2",
                        self.rel_max_distance
                    ));
                }
            }
            PositionMode::LearnedAbsolute => {
                if self.max_positions == 0 {
                    return bad("learned_absolute requires max_positions > 0".into());
                }
            }
        }
        Ok(())
    }

    pub fn has_encoder(&self) -> bool {
        self.arch == Arch::EncoderDecoder
    }

    /// Layers in the stack used for composition: the encoder of an
    /// encoder-decoder model, otherwise the single decoder stack.
    pub fn composition_layers(&self) -> usize {
        match self.arch {
            Arch::EncoderDecoder => self.n_layers_enc,
            Arch::DecoderOnly => self.n_layers_dec,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = ModelConfig::t5_like(10, 64, 4, 1);
        c.n_heads = 3;
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("D not divisible by H"), "{err}");
    }

    #[test]
    fn decoder_only_forbids_encoder_layers() {
        let mut c = ModelConfig::gpt2_like(10, 8, 2, 1);
        c.validate().unwrap();
        c.n_layers_enc = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip_uses_snake_case() {
        let c = ModelConfig::t5_like(10, 8, 2, 1);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"relative_bucket_bias\""));
        assert!(s.contains("\"encoder_decoder\""));
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
