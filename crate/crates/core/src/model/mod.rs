//! The composition function: encoder and decoder stacks, decoding steps and
//! walks, with hooks exposing every intermediate residual-stream state.

pub mod attention;
pub mod position;
pub mod verify;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{
    Arch, AttentionWeights, AttnScale, FeedForwardWeights, ModelBundle, NormKind, NormWeights, PositionMode, StackKind,
    StackWeights,
};
use crate::numkern::{inner, layer_norm_standard, log_softmax, rms_norm, softmax, Matrix};

use attention::{
    attend_projected, multi_head_attention_refactored, multi_head_attention_standard, project, AttentionHeadView,
    AttentionPath, AttnParams, HeadTrace,
};
use position::{relative_bias, BucketSpec};

/// Named points of a position's walk through one stack, in stack order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CheckpointTag {
    E,
    NormSA,
    PostSA,
    NormXA,
    PostXA,
    NormFF,
    PostFF,
    FinalNorm,
}

impl CheckpointTag {
    pub const ALL: [CheckpointTag; 8] = [
        CheckpointTag::E,
        CheckpointTag::NormSA,
        CheckpointTag::PostSA,
        CheckpointTag::NormXA,
        CheckpointTag::PostXA,
        CheckpointTag::NormFF,
        CheckpointTag::PostFF,
        CheckpointTag::FinalNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckpointTag::E => "E",
            CheckpointTag::NormSA => "NormSA",
            CheckpointTag::PostSA => "PostSA",
            CheckpointTag::NormXA => "NormXA",
            CheckpointTag::PostXA => "PostXA",
            CheckpointTag::NormFF => "NormFF",
            CheckpointTag::PostFF => "PostFF",
            CheckpointTag::FinalNorm => "FinalNorm",
        }
    }
}

impl fmt::Display for CheckpointTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckpointTag {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown checkpoint tag {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    SelfEnc,
    SelfDec,
    Cross,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::SelfEnc => "self_enc",
            AttentionKind::SelfDec => "self_dec",
            AttentionKind::Cross => "cross",
        })
    }
}

/// What a forward pass should record.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TraceOptions {
    pub checkpoints: bool,
    pub attention: bool,
    /// Return the hidden state entering this layer instead of the stack
    /// output; the layer count itself means the post-final-norm output.
    pub stop_before_layer: Option<usize>,
}

impl TraceOptions {
    pub fn all() -> Self {
        Self {
            checkpoints: true,
            attention: true,
            stop_before_layer: None,
        }
    }
}

/// Whole-sequence state at one checkpoint. `E` sits at layer 0 and
/// `FinalNorm` at the layer count.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stack: StackKind,
    pub layer: usize,
    pub tag: CheckpointTag,
    pub vectors: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub stack: StackKind,
    pub layer: usize,
    pub kind: AttentionKind,
    pub head: usize,
    pub trace: HeadTrace,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardTrace {
    pub checkpoints: Vec<Checkpoint>,
    pub attention: Vec<AttentionRecord>,
}

impl ForwardTrace {
    pub fn checkpoint(&self, stack: StackKind, layer: usize, tag: CheckpointTag) -> Option<&Checkpoint> {
        self.checkpoints
            .iter()
            .find(|c| c.stack == stack && c.layer == layer && c.tag == tag)
    }

    pub fn head(&self, stack: StackKind, layer: usize, kind: AttentionKind, head: usize) -> Option<&HeadTrace> {
        self.attention
            .iter()
            .find(|r| r.stack == stack && r.layer == layer && r.kind == kind && r.head == head)
            .map(|r| &r.trace)
    }
}

struct Recorder {
    opts: TraceOptions,
    trace: ForwardTrace,
}

impl Recorder {
    fn new(opts: TraceOptions) -> Self {
        Self {
            opts,
            trace: ForwardTrace::default(),
        }
    }

    fn checkpoint(&mut self, stack: StackKind, layer: usize, tag: CheckpointTag, x: &Matrix) {
        if self.opts.checkpoints {
            self.trace.checkpoints.push(Checkpoint {
                stack,
                layer,
                tag,
                vectors: x.clone(),
            });
        }
    }

    fn heads(&mut self, stack: StackKind, layer: usize, kind: AttentionKind, traces: Option<Vec<HeadTrace>>) {
        for (head, trace) in traces.into_iter().flatten().enumerate() {
            self.trace.attention.push(AttentionRecord {
                stack,
                layer,
                kind,
                head,
                trace,
            });
        }
    }
}

/// Output of one decoding step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// Decoder top vector after the final norm.
    pub d_t: Vec<f32>,
    pub logits: Vec<f32>,
    pub probs: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Greedy,
    Sample { seed: u64, temperature: f32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeOptions {
    /// Incremental decoding with cached keys and values.
    pub cached: bool,
    /// Keep a full forward trace for every step (implies uncached).
    pub trace: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            cached: true,
            trace: false,
        }
    }
}

/// A decoding walk: emitted tokens, the vectors `d_t` that produced them,
/// and each step's next-token distribution.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeWalk {
    pub tokens: Vec<u32>,
    pub walk: Vec<Vec<f32>>,
    pub probs: Vec<Vec<f32>>,
    pub traces: Vec<ForwardTrace>,
}

struct LayerViews {
    self_attn: Vec<AttentionHeadView>,
    cross_attn: Option<Vec<AttentionHeadView>>,
}

/// A loaded bundle ready to run. Immutable; share it across threads.
pub struct Model {
    bundle: ModelBundle,
    path: AttentionPath,
    enc_views: Vec<LayerViews>,
    dec_views: Vec<LayerViews>,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.bundle.config)
            .field("path", &self.path)
            .finish()
    }
}

fn views_for(stack: &StackWeights, n_heads: usize, d_head: usize) -> Result<Vec<LayerViews>> {
    stack
        .layers
        .iter()
        .map(|l| {
            Ok(LayerViews {
                self_attn: AttentionHeadView::all_heads(&l.self_attn, n_heads, d_head)?,
                cross_attn: l
                    .cross_attn
                    .as_ref()
                    .map(|w| AttentionHeadView::all_heads(w, n_heads, d_head))
                    .transpose()?,
            })
        })
        .collect()
}

/// Per-layer cache for incremental decoding.
struct LayerCache {
    self_in: Matrix,
    self_k: Matrix,
    self_v: Matrix,
    cross_k: Option<Matrix>,
    cross_v: Option<Matrix>,
}

/// Incremental decoder state: every position fed so far.
pub struct DecoderCache {
    memory: Option<Matrix>,
    layers: Vec<LayerCache>,
    len: usize,
}

impl DecoderCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl Model {
    pub fn new(bundle: ModelBundle) -> Result<Self> {
        bundle.config.validate()?;
        Ok(Self {
            bundle,
            path: AttentionPath::Standard,
            enc_views: Vec::new(),
            dec_views: Vec::new(),
        })
    }

    /// Selects the attention implementation; the refactored path
    /// precomputes `W_qk,h` and `W_vo,h` for every head.
    pub fn with_path(mut self, path: AttentionPath) -> Result<Self> {
        self.path = path;
        if path == AttentionPath::Refactored {
            let (h, d) = (self.bundle.config.n_heads, self.bundle.config.d_head);
            if let Some(enc) = &self.bundle.weights.encoder {
                self.enc_views = views_for(enc, h, d)?;
            }
            self.dec_views = views_for(&self.bundle.weights.decoder, h, d)?;
        }
        Ok(self)
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn config(&self) -> &crate::io::ModelConfig {
        &self.bundle.config
    }

    pub fn path(&self) -> AttentionPath {
        self.path
    }

    pub fn has_encoder(&self) -> bool {
        self.bundle.config.arch == Arch::EncoderDecoder
    }

    /// The stack that encodes context: the encoder when there is one,
    /// otherwise the causal decoder.
    pub fn context_stack(&self) -> StackKind {
        if self.has_encoder() {
            StackKind::Enc
        } else {
            StackKind::Dec
        }
    }

    pub fn n_layers(&self, kind: StackKind) -> usize {
        match kind {
            StackKind::Enc => self.bundle.config.n_layers_enc,
            StackKind::Dec => self.bundle.config.n_layers_dec,
        }
    }

    fn stack(&self, kind: StackKind) -> Result<&StackWeights> {
        self.bundle
            .stack(kind)
            .ok_or_else(|| Error::Unsupported(format!("model has no {kind} stack")))
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        let v = self.bundle.config.vocab_size;
        match ids.iter().find(|&&id| id as usize >= v) {
            Some(&id) => Err(Error::TokenOutOfRange { id, vocab_size: v }),
            None => Ok(()),
        }
    }

    /// Raw token rows, no positions.
    pub fn token_vectors(&self, ids: &[u32]) -> Result<Matrix> {
        self.check_ids(ids)?;
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        Ok(self.bundle.vocab.embedding.select_rows(&idx))
    }

    /// Adds learned absolute position rows `start..` in place; a no-op for
    /// relative-bias models.
    pub fn add_positions(&self, x: &mut Matrix, start: usize) -> Result<()> {
        if self.bundle.config.position_mode != PositionMode::LearnedAbsolute {
            return Ok(());
        }
        let pos = self
            .bundle
            .weights
            .pos_embedding
            .as_ref()
            .ok_or_else(|| Error::MissingTensor("pos.embedding".into()))?;
        for i in 0..x.rows() {
            let p = start + i;
            if p >= pos.rows() {
                return Err(Error::PositionOutOfRange {
                    position: p,
                    len: pos.rows(),
                });
            }
            for (a, &b) in x.row_mut(i).iter_mut().zip(pos.row(p)) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Token rows plus learned positions: the stack input for `ids`.
    pub fn embed(&self, ids: &[u32]) -> Result<Matrix> {
        let mut x = self.token_vectors(ids)?;
        self.add_positions(&mut x, 0)?;
        Ok(x)
    }

    /// `[start] + prompt`, the decoder input convention.
    pub fn decoder_prefix(&self, prompt: &[u32]) -> Vec<u32> {
        std::iter::once(self.bundle.config.start_token_id)
            .chain(prompt.iter().copied())
            .collect()
    }

    fn attn_params(&self, causal: bool) -> AttnParams {
        let scale = match self.bundle.config.attn_scale {
            AttnScale::None => 1.0,
            AttnScale::InvSqrtD => 1.0 / (self.bundle.config.d_head as f32).sqrt(),
        };
        AttnParams::new(scale, causal)
    }

    fn bias_for(&self, kind: StackKind, n: usize, m: usize, q_offset: usize) -> Result<Option<Vec<Matrix>>> {
        let cfg = &self.bundle.config;
        if cfg.position_mode != PositionMode::RelativeBucketBias {
            return Ok(None);
        }
        let spec = BucketSpec {
            num_buckets: cfg.rel_buckets,
            max_distance: cfg.rel_max_distance,
            bidirectional: kind == StackKind::Enc,
        };
        Ok(self
            .stack(kind)?
            .rel_bias
            .as_ref()
            .map(|rel| relative_bias(rel, spec, n, m, q_offset)))
    }

    /// Relative bias matrices one stack's self-attention uses on `n`
    /// positions, if it has any.
    pub fn self_attention_bias(&self, kind: StackKind, n: usize) -> Result<Option<Vec<Matrix>>> {
        self.bias_for(kind, n, n, 0)
    }

    pub fn norm(&self, w: &NormWeights, x: &Matrix) -> Result<Matrix> {
        let cfg = &self.bundle.config;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        let zeros = vec![0.0; x.cols()];
        let bias = w.bias.as_deref().unwrap_or(&zeros);
        for i in 0..x.rows() {
            let r = match cfg.norm {
                NormKind::Rms => rms_norm(x.row(i), &w.scale, cfg.norm_eps)?,
                NormKind::Standard => layer_norm_standard(x.row(i), &w.scale, bias, cfg.norm_eps)?,
            };
            out.row_mut(i).copy_from_slice(&r);
        }
        Ok(out)
    }

    fn feed_forward(&self, w: &FeedForwardWeights, x: &Matrix) -> Result<Matrix> {
        let mut h = project(x, &w.w_in, w.b_in.as_deref())?;
        for i in 0..h.rows() {
            self.bundle.config.activation.apply_slice(h.row_mut(i));
        }
        project(&h, &w.w_out, w.b_out.as_deref())
    }

    fn views(&self, kind: StackKind, layer: usize, cross: bool) -> &[AttentionHeadView] {
        let views = match kind {
            StackKind::Enc => &self.enc_views[layer],
            StackKind::Dec => &self.dec_views[layer],
        };
        if cross {
            views.cross_attn.as_deref().unwrap_or(&[])
        } else {
            &views.self_attn
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        kind: StackKind,
        layer: usize,
        w: &AttentionWeights,
        cross: bool,
        x_q: &Matrix,
        x_kv: &Matrix,
        bias: Option<&[Matrix]>,
        params: AttnParams,
        keep: bool,
    ) -> Result<(Matrix, Option<Vec<HeadTrace>>)> {
        let h = self.bundle.config.n_heads;
        match self.path {
            AttentionPath::Standard => multi_head_attention_standard(w, h, x_q, x_kv, bias, params, keep),
            AttentionPath::Refactored => multi_head_attention_refactored(
                self.views(kind, layer, cross),
                w.bo.as_deref(),
                x_q,
                x_kv,
                bias,
                params,
                keep,
            ),
        }
    }

    fn check_memory<'m>(&self, kind: StackKind, memory: Option<&'m Matrix>) -> Result<Option<&'m Matrix>> {
        if kind == StackKind::Enc {
            return Ok(None);
        }
        match (self.has_encoder(), memory) {
            (true, None) => Err(Error::MissingMemory),
            (true, Some(m)) if m.is_empty() => Err(Error::EmptySequence),
            (true, Some(m)) => Ok(Some(m)),
            (false, Some(_)) => Err(Error::Unsupported("decoder-only model takes no encoder memory".into())),
            (false, None) => Ok(None),
        }
    }

    fn layer_forward(
        &self,
        kind: StackKind,
        l: usize,
        mut x: Matrix,
        memory: Option<&Matrix>,
        bias: Option<&[Matrix]>,
        rec: &mut Recorder,
    ) -> Result<Matrix> {
        let lw = &self.stack(kind)?.layers[l];
        let causal = kind == StackKind::Dec;
        let self_kind = if causal {
            AttentionKind::SelfDec
        } else {
            AttentionKind::SelfEnc
        };
        let keep = rec.opts.attention;

        let xn = self.norm(&lw.norm_sa, &x)?;
        rec.checkpoint(kind, l, CheckpointTag::NormSA, &xn);
        let (o, t) = self.attend(
            kind,
            l,
            &lw.self_attn,
            false,
            &xn,
            &xn,
            bias,
            self.attn_params(causal),
            keep,
        )?;
        rec.heads(kind, l, self_kind, t);
        x.add_assign(&o)?;
        rec.checkpoint(kind, l, CheckpointTag::PostSA, &x);

        if let (Some(norm), Some(w)) = (&lw.norm_xa, &lw.cross_attn) {
            let mem = memory.ok_or(Error::MissingMemory)?;
            let xn = self.norm(norm, &x)?;
            rec.checkpoint(kind, l, CheckpointTag::NormXA, &xn);
            let (o, t) = self.attend(kind, l, w, true, &xn, mem, None, self.attn_params(false), keep)?;
            rec.heads(kind, l, AttentionKind::Cross, t);
            x.add_assign(&o)?;
            rec.checkpoint(kind, l, CheckpointTag::PostXA, &x);
        }

        let xn = self.norm(&lw.norm_ff, &x)?;
        rec.checkpoint(kind, l, CheckpointTag::NormFF, &xn);
        x.add_assign(&self.feed_forward(&lw.ff, &xn)?)?;
        rec.checkpoint(kind, l, CheckpointTag::PostFF, &x);
        Ok(x)
    }

    /// Runs one stack on its input (positions already added).
    pub fn run_stack(
        &self,
        kind: StackKind,
        input: Matrix,
        memory: Option<&Matrix>,
        opts: TraceOptions,
    ) -> Result<(Matrix, ForwardTrace)> {
        if input.is_empty() {
            return Err(Error::EmptySequence);
        }
        let d = self.bundle.config.d_model;
        if input.cols() != d {
            return Err(Error::DimMismatch(format!(
                "input width {} != d_model {d}",
                input.cols()
            )));
        }
        let stack = self.stack(kind)?;
        let n_layers = stack.layers.len();
        let stop = opts.stop_before_layer.unwrap_or(n_layers);
        if stop > n_layers {
            return Err(Error::LayerOutOfRange(format!(
                "layer {stop} of a {n_layers}-layer {kind} stack"
            )));
        }
        let memory = self.check_memory(kind, memory)?;
        let mut rec = Recorder::new(opts);
        rec.checkpoint(kind, 0, CheckpointTag::E, &input);
        let bias = self.self_attention_bias(kind, input.rows())?;
        let mut x = input;
        for l in 0..stop {
            x = self.layer_forward(kind, l, x, memory, bias.as_deref(), &mut rec)?;
        }
        if stop < n_layers {
            return Ok((x, rec.trace));
        }
        let out = self.norm(&stack.final_norm, &x)?;
        rec.checkpoint(kind, n_layers, CheckpointTag::FinalNorm, &out);
        Ok((out, rec.trace))
    }

    /// One encoder layer `f_C^l` on a stack-internal state.
    pub fn encoder_layer(&self, l: usize, x: &Matrix) -> Result<Matrix> {
        self.single_layer(StackKind::Enc, l, x, None)
    }

    /// One decoder layer `f_D^l`; `memory` is the encoder output for
    /// encoder-decoder models.
    pub fn decoder_layer(&self, l: usize, memory: Option<&Matrix>, x: &Matrix) -> Result<Matrix> {
        self.single_layer(StackKind::Dec, l, x, memory)
    }

    fn single_layer(&self, kind: StackKind, l: usize, x: &Matrix, memory: Option<&Matrix>) -> Result<Matrix> {
        let n_layers = self.stack(kind)?.layers.len();
        if l >= n_layers {
            return Err(Error::LayerOutOfRange(format!("layer {l} of {n_layers}")));
        }
        if x.is_empty() {
            return Err(Error::EmptySequence);
        }
        let memory = self.check_memory(kind, memory)?;
        let bias = self.self_attention_bias(kind, x.rows())?;
        let mut rec = Recorder::new(TraceOptions::default());
        self.layer_forward(kind, l, x.clone(), memory, bias.as_deref(), &mut rec)
    }

    /// Encodes raw vectors (positions are added here).
    pub fn encode(&self, raw: &Matrix) -> Result<Matrix> {
        Ok(self.encode_traced(raw, TraceOptions::default())?.0)
    }

    pub fn encode_traced(&self, raw: &Matrix, opts: TraceOptions) -> Result<(Matrix, ForwardTrace)> {
        if !self.has_encoder() {
            return Err(Error::Unsupported("decoder-only model has no encoder".into()));
        }
        let mut x = raw.clone();
        self.add_positions(&mut x, 0)?;
        self.run_stack(StackKind::Enc, x, None, opts)
    }

    pub fn encode_ids(&self, ids: &[u32]) -> Result<Matrix> {
        self.encode(&self.token_vectors(ids)?)
    }

    /// Runs the decoder on raw vectors (positions added from 0).
    pub fn decode_sequence(
        &self,
        memory: Option<&Matrix>,
        raw: &Matrix,
        opts: TraceOptions,
    ) -> Result<(Matrix, ForwardTrace)> {
        let mut x = raw.clone();
        self.add_positions(&mut x, 0)?;
        self.run_stack(StackKind::Dec, x, memory, opts)
    }

    pub fn logits(&self, d_t: &[f32]) -> Vec<f32> {
        self.bundle
            .unembedding()
            .iter_rows()
            .map(|row| inner(d_t, row))
            .collect()
    }

    pub fn step_output(&self, d_t: Vec<f32>) -> Result<StepOutput> {
        let logits = self.logits(&d_t);
        let probs = softmax(&logits)?;
        Ok(StepOutput { d_t, logits, probs })
    }

    /// Next-token distribution after a raw-vector prefix. The caller
    /// supplies the start vector (see [`Model::decoder_prefix`]).
    pub fn decode_step(&self, memory: Option<&Matrix>, prefix: &Matrix) -> Result<StepOutput> {
        Ok(self.decode_step_traced(memory, prefix, TraceOptions::default())?.0)
    }

    pub fn decode_step_traced(
        &self,
        memory: Option<&Matrix>,
        prefix: &Matrix,
        opts: TraceOptions,
    ) -> Result<(StepOutput, ForwardTrace)> {
        let (out, trace) = self.decode_sequence(memory, prefix, opts)?;
        let last = out.row(out.rows() - 1).to_vec();
        Ok((self.step_output(last)?, trace))
    }

    /// `log P(token | rows ..= row)` for each `(row, token)` pick, from one
    /// teacher-forced decoder pass over `raw`.
    pub fn token_log_probs(&self, memory: Option<&Matrix>, raw: &Matrix, picks: &[(usize, u32)]) -> Result<Vec<f64>> {
        let (out, _) = self.decode_sequence(memory, raw, TraceOptions::default())?;
        picks
            .iter()
            .map(|&(row, tok)| {
                if row >= out.rows() {
                    return Err(Error::PositionOutOfRange {
                        position: row,
                        len: out.rows(),
                    });
                }
                self.check_ids(&[tok])?;
                Ok(log_softmax(&self.logits(out.row(row)))?[tok as usize])
            })
            .collect()
    }

    pub fn new_cache(&self, memory: Option<&Matrix>) -> Result<DecoderCache> {
        let memory = self.check_memory(StackKind::Dec, memory)?;
        let d = self.bundle.config.d_model;
        let layers = self
            .bundle
            .weights
            .decoder
            .layers
            .iter()
            .map(|lw| {
                let (cross_k, cross_v) = match (&lw.cross_attn, memory) {
                    (Some(w), Some(m)) if self.path == AttentionPath::Standard => (
                        Some(project(m, &w.wk, w.bk.as_deref())?),
                        Some(project(m, &w.wv, w.bv.as_deref())?),
                    ),
                    _ => (None, None),
                };
                Ok(LayerCache {
                    self_in: Matrix::empty(d),
                    self_k: Matrix::empty(d),
                    self_v: Matrix::empty(d),
                    cross_k,
                    cross_v,
                })
            })
            .collect::<Result<_>>()?;
        Ok(DecoderCache {
            memory: memory.cloned(),
            layers,
            len: 0,
        })
    }

    /// Feeds one raw vector to the decoder and returns the top vector at
    /// its position.
    pub fn cached_step(&self, cache: &mut DecoderCache, raw: &[f32]) -> Result<Vec<f32>> {
        let cfg = &self.bundle.config;
        let pos = cache.len;
        let mut x = Matrix::new(1, cfg.d_model, raw.to_vec())?;
        self.add_positions(&mut x, pos)?;
        let bias = self.bias_for(StackKind::Dec, 1, pos + 1, pos)?;
        let mut params = self.attn_params(true);
        params.q_offset = pos;
        let stack = &self.bundle.weights.decoder;
        for (l, lw) in stack.layers.iter().enumerate() {
            let c = &mut cache.layers[l];
            let xn = self.norm(&lw.norm_sa, &x)?;
            c.self_in.push_row(xn.row(0))?;
            let o = match self.path {
                AttentionPath::Standard => {
                    let w = &lw.self_attn;
                    c.self_k.push_row(project(&xn, &w.wk, w.bk.as_deref())?.row(0))?;
                    c.self_v.push_row(project(&xn, &w.wv, w.bv.as_deref())?.row(0))?;
                    let q = project(&xn, &w.wq, w.bq.as_deref())?;
                    let (ctx, _) =
                        attend_projected(&q, &c.self_k, &c.self_v, cfg.n_heads, bias.as_deref(), params, false)?;
                    project(&ctx, &w.wo, w.bo.as_deref())?
                }
                AttentionPath::Refactored => {
                    multi_head_attention_refactored(
                        self.views(StackKind::Dec, l, false),
                        lw.self_attn.bo.as_deref(),
                        &xn,
                        &c.self_in,
                        bias.as_deref(),
                        params,
                        false,
                    )?
                    .0
                }
            };
            x.add_assign(&o)?;
            if let (Some(norm), Some(w)) = (&lw.norm_xa, &lw.cross_attn) {
                let mem = cache.memory.as_ref().ok_or(Error::MissingMemory)?;
                let xn = self.norm(norm, &x)?;
                let p = self.attn_params(false);
                let o = match (&c.cross_k, &c.cross_v) {
                    (Some(k), Some(v)) => {
                        let q = project(&xn, &w.wq, w.bq.as_deref())?;
                        let (ctx, _) = attend_projected(&q, k, v, cfg.n_heads, None, p, false)?;
                        project(&ctx, &w.wo, w.bo.as_deref())?
                    }
                    _ => self.attend(StackKind::Dec, l, w, true, &xn, mem, None, p, false)?.0,
                };
                x.add_assign(&o)?;
            }
            let xn = self.norm(&lw.norm_ff, &x)?;
            x.add_assign(&self.feed_forward(&lw.ff, &xn)?)?;
        }
        cache.len += 1;
        Ok(self.norm(&stack.final_norm, &x)?.into_data())
    }

    /// Greedy or seeded sampled decoding from `[start] + prompt`.
    pub fn decode_walk(
        &self,
        memory: Option<&Matrix>,
        prompt: &[u32],
        steps: usize,
        policy: Policy,
    ) -> Result<DecodeWalk> {
        self.decode_walk_with(memory, prompt, steps, policy, DecodeOptions::default())
    }

    pub fn decode_walk_with(
        &self,
        memory: Option<&Matrix>,
        prompt: &[u32],
        steps: usize,
        policy: Policy,
        opts: DecodeOptions,
    ) -> Result<DecodeWalk> {
        if steps == 0 {
            return Err(Error::Unsupported("decode needs at least one step".into()));
        }
        if let Policy::Sample { temperature, .. } = policy {
            if !(temperature.is_finite() && temperature > 0.0) {
                return Err(Error::Unsupported(format!(
                    "temperature {temperature} must be positive"
                )));
            }
        }
        let mut ids = self.decoder_prefix(prompt);
        self.check_ids(&ids)?;
        let mut rng = match policy {
            Policy::Sample { seed, .. } => Some(crate::synth::rng(seed)),
            Policy::Greedy => None,
        };
        let cached = opts.cached && !opts.trace;
        let mut cache = if cached { Some(self.new_cache(memory)?) } else { None };
        let mut out = DecodeWalk::default();
        let mut fed = 0;
        for step in 0..steps {
            let d_t = match cache.as_mut() {
                Some(cache) => {
                    let mut last = Vec::new();
                    while fed < ids.len() {
                        let row = self.bundle.vocab.embedding.row(ids[fed] as usize).to_vec();
                        last = self.cached_step(cache, &row)?;
                        fed += 1;
                    }
                    last
                }
                None => {
                    let topts = if opts.trace {
                        TraceOptions::all()
                    } else {
                        TraceOptions::default()
                    };
                    let (o, trace) = self.decode_sequence(memory, &self.token_vectors(&ids)?, topts)?;
                    if opts.trace {
                        out.traces.push(trace);
                    }
                    o.row(o.rows() - 1).to_vec()
                }
            };
            let s = self.step_output(d_t)?;
            let next = match (policy, rng.as_mut()) {
                (Policy::Sample { temperature, .. }, Some(rng)) => sample(&s.logits, temperature, rng)?,
                _ => crate::numkern::argmax(&s.logits)? as u32,
            };
            out.tokens.push(next);
            out.walk.push(s.d_t);
            out.probs.push(s.probs);
            if step + 1 < steps {
                ids.push(next);
            }
        }
        Ok(out)
    }
}

/// Inverse-CDF draw from `softmax(logits / temperature)`.
fn sample(logits: &[f32], temperature: f32, rng: &mut impl Rng) -> Result<u32> {
    let scaled: Vec<f32> = logits.iter().map(|&l| l / temperature).collect();
    let p = softmax(&scaled)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0f64;
    let mut last_positive = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            last_positive = i;
        }
        acc += f64::from(pi);
        if u < acc {
            return Ok(i as u32);
        }
    }
    Ok(last_positive as u32)
}
