//! Model bundles: `config.json`, `vocab.json` and `weights.bin` in one
//! directory.
//!
//! Tensor names are flat:
//!
//! | name | shape |
//! |------|-------|
//! | `tok.embedding` | V x D |
//! | `pos.embedding` (learned absolute only) | max_positions x D |
//! | `lm_head` (untied only) | V x D, logits = d · lm_headᵀ |
//! | `{enc,dec}.{l}.attn.{wq,wk,wv,wo}` | D x D |
//! | `{enc,dec}.{l}.attn.{bq,bk,bv,bo}` (optional) | D |
//! | `dec.{l}.xattn.{wq,wk,wv,wo}` (encoder-decoder) | D x D |
//! | `dec.{l}.xattn.{bq,bk,bv,bo}` (optional) | D |
//! | `{enc,dec}.{l}.ff.win` / `ff.wout` | D x d_ff / d_ff x D |
//! | `{enc,dec}.{l}.ff.{bin,bout}` (optional) | d_ff / D |
//! | `{enc,dec}.{l}.{ln1,ln2,ln3}.scale` (+ `.bias` for standard norm) | D |
//! | `{enc,dec}.relbias` (relative positions, stacks with layers) | H x rel_buckets |
//! | `{enc,dec}.final_ln.scale` (+ `.bias`) | D |
//!
//! Norms are numbered in sublayer order: self-attention, cross-attention
//! (decoder of an encoder-decoder model only), feed-forward.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Arch, ModelConfig, NormKind, PositionMode};
use super::weights::{read_weights, write_weights, Tensor, TensorMap};
use crate::error::{Error, Result};
use crate::numkern::Matrix;

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct NormWeights {
    pub scale: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub bq: Option<Vec<f32>>,
    pub bk: Option<Vec<f32>>,
    pub bv: Option<Vec<f32>>,
    pub bo: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardWeights {
    pub w_in: Matrix,
    pub w_out: Matrix,
    pub b_in: Option<Vec<f32>>,
    pub b_out: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub norm_sa: NormWeights,
    pub self_attn: AttentionWeights,
    pub norm_xa: Option<NormWeights>,
    pub cross_attn: Option<AttentionWeights>,
    pub norm_ff: NormWeights,
    pub ff: FeedForwardWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackWeights {
    pub layers: Vec<LayerWeights>,
    /// H x rel_buckets, shared by every layer of the stack.
    pub rel_bias: Option<Matrix>,
    pub final_norm: NormWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub pos_embedding: Option<Matrix>,
    pub lm_head: Option<Matrix>,
    pub encoder: Option<StackWeights>,
    pub decoder: StackWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
    /// V x D; row `w` is the vector of token `w`.
    pub embedding: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    pub vocab: Vocabulary,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    tokens: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackKind {
    Enc,
    Dec,
}

impl StackKind {
    pub fn prefix(self) -> &'static str {
        match self {
            StackKind::Enc => "enc",
            StackKind::Dec => "dec",
        }
    }
}

impl std::fmt::Display for StackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.prefix())
    }
}

impl std::str::FromStr for StackKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "enc" => Ok(StackKind::Enc),
            "dec" => Ok(StackKind::Dec),
            _ => Err(format!("unknown stack {s:?}, expected enc|dec")),
        }
    }
}

impl ModelBundle {
    pub fn stack(&self, kind: StackKind) -> Option<&StackWeights> {
        match kind {
            StackKind::Enc => self.weights.encoder.as_ref(),
            StackKind::Dec => Some(&self.weights.decoder),
        }
    }

    /// Matrix whose rows score the next token: `lm_head` when untied,
    /// the token embedding otherwise.
    pub fn unembedding(&self) -> &Matrix {
        match (&self.weights.lm_head, self.config.tied_embeddings) {
            (Some(h), false) => h,
            _ => &self.vocab.embedding,
        }
    }

    pub fn to_tensors(&self) -> TensorMap {
        let mut m = TensorMap::new();
        put_matrix(&mut m, "tok.embedding", &self.vocab.embedding);
        if let Some(p) = &self.weights.pos_embedding {
            put_matrix(&mut m, "pos.embedding", p);
        }
        if let Some(h) = &self.weights.lm_head {
            put_matrix(&mut m, "lm_head", h);
        }
        if let Some(enc) = &self.weights.encoder {
            put_stack(&mut m, StackKind::Enc, enc);
        }
        put_stack(&mut m, StackKind::Dec, &self.weights.decoder);
        m
    }

    pub fn from_tensors(config: ModelConfig, tokens: Vec<String>, tensors: TensorMap) -> Result<Self> {
        config.validate()?;
        let mut src = TensorSource {
            map: tensors,
            config: &config,
        };
        let (v, d) = (config.vocab_size, config.d_model);
        let embedding = src.matrix("tok.embedding", v, d)?;
        let pos_embedding = match config.position_mode {
            PositionMode::LearnedAbsolute => Some(src.matrix("pos.embedding", config.max_positions, d)?),
            PositionMode::RelativeBucketBias => None,
        };
        let lm_head = if config.tied_embeddings {
            None
        } else {
            Some(src.matrix("lm_head", v, d)?)
        };
        let encoder = match config.arch {
            Arch::EncoderDecoder => Some(src.stack(StackKind::Enc, config.n_layers_enc, false)?),
            Arch::DecoderOnly => None,
        };
        let decoder = src.stack(StackKind::Dec, config.n_layers_dec, config.has_encoder())?;
        if let Some(name) = src.map.keys().next() {
            return Err(Error::UnknownTensor(name.clone()));
        }
        let bundle = Self {
            weights: ModelWeights {
                pos_embedding,
                lm_head,
                encoder,
                decoder,
            },
            vocab: Vocabulary { tokens, embedding },
            config,
        };
        bundle.validate_vocab()?;
        Ok(bundle)
    }

    fn validate_vocab(&self) -> Result<()> {
        if self.vocab.tokens.len() != self.config.vocab_size {
            return Err(Error::InvalidVocab(format!(
                "{} tokens for vocab_size {}",
                self.vocab.tokens.len(),
                self.config.vocab_size
            )));
        }
        let mut seen = HashSet::with_capacity(self.vocab.tokens.len());
        for t in &self.vocab.tokens {
            if !seen.insert(t.as_str()) {
                return Err(Error::InvalidVocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(())
    }

    /// Full consistency check of an in-memory bundle: shapes, config
    /// invariants, vocabulary, and finite values.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = Self::from_tensors(self.config.clone(), self.vocab.tokens.clone(), self.to_tensors())?;
        debug_assert_eq!(&rebuilt, self);
        for (name, t) in self.to_tensors() {
            if !t.data.iter().all(|v| v.is_finite()) {
                return Err(Error::MalformedTensor(format!("{name}: non-finite value")));
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(&std::fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        config.validate()?;
        let vocab: VocabFile = serde_json::from_str(&std::fs::read_to_string(dir.join(VOCAB_FILE))?)?;
        let tensors = read_weights(&dir.join(WEIGHTS_FILE))?;
        Self::from_tensors(config, vocab.tokens, tensors)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir)?;
        let mut cfg = serde_json::to_string_pretty(&self.config)?;
        cfg.push('\n');
        std::fs::write(dir.join(CONFIG_FILE), cfg)?;
        let mut voc = serde_json::to_string(&VocabFile {
            tokens: self.vocab.tokens.clone(),
        })?;
        voc.push('\n');
        std::fs::write(dir.join(VOCAB_FILE), voc)?;
        write_weights(&dir.join(WEIGHTS_FILE), &self.to_tensors())
    }
}

pub fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    ModelBundle::load(dir)
}

pub fn save_bundle(bundle: &ModelBundle, dir: &Path) -> Result<()> {
    bundle.save(dir)
}

fn put_matrix(m: &mut TensorMap, name: &str, x: &Matrix) {
    m.insert(
        name.to_owned(),
        Tensor {
            dims: vec![x.rows(), x.cols()],
            data: x.data().to_vec(),
        },
    );
}

fn put_vec(m: &mut TensorMap, name: &str, v: &[f32]) {
    m.insert(
        name.to_owned(),
        Tensor {
            dims: vec![v.len()],
            data: v.to_vec(),
        },
    );
}

fn put_norm(m: &mut TensorMap, name: &str, n: &NormWeights) {
    put_vec(m, &format!("{name}.scale"), &n.scale);
    if let Some(b) = &n.bias {
        put_vec(m, &format!("{name}.bias"), b);
    }
}

fn put_attention(m: &mut TensorMap, name: &str, a: &AttentionWeights) {
    put_matrix(m, &format!("{name}.wq"), &a.wq);
    put_matrix(m, &format!("{name}.wk"), &a.wk);
    put_matrix(m, &format!("{name}.wv"), &a.wv);
    put_matrix(m, &format!("{name}.wo"), &a.wo);
    for (suffix, b) in [("bq", &a.bq), ("bk", &a.bk), ("bv", &a.bv), ("bo", &a.bo)] {
        if let Some(b) = b {
            put_vec(m, &format!("{name}.{suffix}"), b);
        }
    }
}

fn put_stack(m: &mut TensorMap, kind: StackKind, s: &StackWeights) {
    let p = kind.prefix();
    for (l, layer) in s.layers.iter().enumerate() {
        let mut ln = 1;
        put_norm(m, &format!("{p}.{l}.ln{ln}"), &layer.norm_sa);
        put_attention(m, &format!("{p}.{l}.attn"), &layer.self_attn);
        if let (Some(norm), Some(xa)) = (&layer.norm_xa, &layer.cross_attn) {
            ln += 1;
            put_norm(m, &format!("{p}.{l}.ln{ln}"), norm);
            put_attention(m, &format!("{p}.{l}.xattn"), xa);
        }
        ln += 1;
        put_norm(m, &format!("{p}.{l}.ln{ln}"), &layer.norm_ff);
        put_matrix(m, &format!("{p}.{l}.ff.win"), &layer.ff.w_in);
        put_matrix(m, &format!("{p}.{l}.ff.wout"), &layer.ff.w_out);
        if let Some(b) = &layer.ff.b_in {
            put_vec(m, &format!("{p}.{l}.ff.bin"), b);
        }
        if let Some(b) = &layer.ff.b_out {
            put_vec(m, &format!("{p}.{l}.ff.bout"), b);
        }
    }
    if let Some(rb) = &s.rel_bias {
        put_matrix(m, &format!("{p}.relbias"), rb);
    }
    put_norm(m, &format!("{p}.final_ln"), &s.final_norm);
}

struct TensorSource<'c> {
    map: TensorMap,
    config: &'c ModelConfig,
}

impl TensorSource<'_> {
    fn take(&mut self, name: &str, expected: &[usize]) -> Result<Vec<f32>> {
        let t = self
            .map
            .remove(name)
            .ok_or_else(|| Error::MissingTensor(name.to_owned()))?;
        if t.dims != expected {
            return Err(Error::ShapeMismatch {
                name: name.to_owned(),
                expected: expected.to_vec(),
                found: t.dims,
            });
        }
        Ok(t.data)
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let data = self.take(name, &[rows, cols])?;
        Matrix::new(rows, cols, data)
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Vec<f32>> {
        self.take(name, &[len])
    }

    fn optional_vector(&mut self, name: &str, len: usize) -> Result<Option<Vec<f32>>> {
        if self.map.contains_key(name) {
            self.vector(name, len).map(Some)
        } else {
            Ok(None)
        }
    }

    fn norm(&mut self, name: &str) -> Result<NormWeights> {
        let d = self.config.d_model;
        let scale = self.vector(&format!("{name}.scale"), d)?;
        let bias = match self.config.norm {
            NormKind::Standard => Some(self.vector(&format!("{name}.bias"), d)?),
            NormKind::Rms => None,
        };
        Ok(NormWeights { scale, bias })
    }

    fn attention(&mut self, name: &str) -> Result<AttentionWeights> {
        let d = self.config.d_model;
        Ok(AttentionWeights {
            wq: self.matrix(&format!("{name}.wq"), d, d)?,
            wk: self.matrix(&format!("{name}.wk"), d, d)?,
            wv: self.matrix(&format!("{name}.wv"), d, d)?,
            wo: self.matrix(&format!("{name}.wo"), d, d)?,
            bq: self.optional_vector(&format!("{name}.bq"), d)?,
            bk: self.optional_vector(&format!("{name}.bk"), d)?,
            bv: self.optional_vector(&format!("{name}.bv"), d)?,
            bo: self.optional_vector(&format!("{name}.bo"), d)?,
        })
    }

    fn stack(&mut self, kind: StackKind, n_layers: usize, cross: bool) -> Result<StackWeights> {
        let p = kind.prefix();
        let (d, ff) = (self.config.d_model, self.config.d_ff);
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let mut ln = 1;
            let norm_sa = self.norm(&format!("{p}.{l}.ln{ln}"))?;
            let self_attn = self.attention(&format!("{p}.{l}.attn"))?;
            let (norm_xa, cross_attn) = if cross {
                ln += 1;
                (
                    Some(self.norm(&format!("{p}.{l}.ln{ln}"))?),
                    Some(self.attention(&format!("{p}.{l}.xattn"))?),
                )
            } else {
                (None, None)
            };
            ln += 1;
            let norm_ff = self.norm(&format!("{p}.{l}.ln{ln}"))?;
            let ff_w = FeedForwardWeights {
                w_in: self.matrix(&format!("{p}.{l}.ff.win"), d, ff)?,
                w_out: self.matrix(&format!("{p}.{l}.ff.wout"), ff, d)?,
                b_in: self.optional_vector(&format!("{p}.{l}.ff.bin"), ff)?,
                b_out: self.optional_vector(&format!("{p}.{l}.ff.bout"), d)?,
            };
            layers.push(LayerWeights {
                norm_sa,
                self_attn,
                norm_xa,
                cross_attn,
                norm_ff,
                ff: ff_w,
            });
        }
        let rel_bias = if self.config.position_mode == PositionMode::RelativeBucketBias && n_layers > 0 {
            Some(self.matrix(&format!("{p}.relbias"), self.config.n_heads, self.config.rel_buckets)?)
        } else {
            None
        };
        let final_norm = self.norm(&format!("{p}.final_ln"))?;
        Ok(StackWeights {
            layers,
            rel_bias,
            final_norm,
        })
    }
}
