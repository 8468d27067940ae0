//! Multi-head attention, two ways.
//!
//! The standard path projects queries, keys and values, attends per head,
//! concatenates the head contexts and applies `W_o`. The refactored path
//! treats each head as an independent operator on the residual stream:
//!
//! ```text
//! A_h = softmax(filter_{W_qk,h}(X_q) X_kvᵀ + B_h)      W_qk,h = W_q,h W_k,hᵀ
//! O_h = A_h filter_{W_vo,h}(X_kv)                      W_vo,h = W_v,h W_o,h
//! O   = Σ_h O_h
//! ```
//!
//! Both paths must agree; the tests and `verify` module check that they do.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::AttentionWeights;
use crate::numkern::{inner, softmax_in_place, Matrix};

/// Additive mask applied to keys after the query position.
pub const CAUSAL_MASK: f32 = -1e9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionPath {
    #[default]
    Standard,
    Refactored,
}

/// Per-call attention settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnParams {
    /// Multiplies raw query-key scores before the bias is added.
    pub scale: f32,
    pub causal: bool,
    /// Absolute position of the first query row.
    pub q_offset: usize,
}

impl AttnParams {
    pub fn new(scale: f32, causal: bool) -> Self {
        Self {
            scale,
            causal,
            q_offset: 0,
        }
    }
}

/// Everything one head computed on the way to its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTrace {
    /// Query-key scores, scaled, before bias.
    pub scores: Matrix,
    pub bias: Matrix,
    /// `scores + bias`, before any causal mask.
    pub pre_softmax: Matrix,
    /// Row-stochastic attention weights `A_h`.
    pub weights: Matrix,
}

/// One head of an attention block viewed as a pair of `D x D` filters.
#[derive(Clone, Debug)]
pub struct AttentionHeadView {
    pub head: usize,
    /// D x d
    pub w_q: Matrix,
    /// D x d
    pub w_k: Matrix,
    /// D x d
    pub w_v: Matrix,
    /// d x D
    pub w_o: Matrix,
    /// D x D, `W_q,h W_k,hᵀ`
    pub w_qk: Matrix,
    /// D x D, `W_v,h W_o,h`
    pub w_vo: Matrix,
    // Query/key bias terms folded into filter form:
    // (x W_q + b_q)(y W_k + b_k)ᵀ = x W_qk yᵀ + x·u + y·w + c
    query_side: Option<Vec<f32>>,
    key_side: Option<Vec<f32>>,
    constant: f32,
    /// `b_v,h W_o,h`, added to every output row (attention rows sum to one).
    value_out: Option<Vec<f32>>,
}

fn slice_bias(b: &Option<Vec<f32>>, start: usize, end: usize) -> Option<Vec<f32>> {
    b.as_ref().map(|b| b[start..end].to_vec())
}

fn mat_vec(m: &Matrix, v: &[f32]) -> Vec<f32> {
    m.iter_rows().map(|r| inner(r, v)).collect()
}

impl AttentionHeadView {
    pub fn new(w: &AttentionWeights, head: usize, d_head: usize) -> Result<Self> {
        let (start, end) = (head * d_head, (head + 1) * d_head);
        if end > w.wq.cols() {
            return Err(Error::HeadOutOfRange {
                head,
                n_heads: w.wq.cols() / d_head.max(1),
            });
        }
        let w_q = w.wq.slice_cols(start, end);
        let w_k = w.wk.slice_cols(start, end);
        let w_v = w.wv.slice_cols(start, end);
        let w_o = w.wo.slice_rows(start, end);
        let w_qk = w_q.matmul(&w_k.transpose())?;
        let w_vo = w_v.matmul(&w_o)?;
        let b_q = slice_bias(&w.bq, start, end);
        let b_k = slice_bias(&w.bk, start, end);
        let b_v = slice_bias(&w.bv, start, end);
        let query_side = b_k.as_ref().map(|bk| mat_vec(&w_q, bk));
        let key_side = b_q.as_ref().map(|bq| mat_vec(&w_k, bq));
        let constant = match (&b_q, &b_k) {
            (Some(q), Some(k)) => inner(q, k),
            _ => 0.0,
        };
        let value_out = b_v
            .as_ref()
            .map(|bv| Matrix::new(1, bv.len(), bv.clone()).and_then(|r| r.matmul(&w_o)))
            .transpose()?
            .map(Matrix::into_data);
        Ok(Self {
            head,
            w_q,
            w_k,
            w_v,
            w_o,
            w_qk,
            w_vo,
            query_side,
            key_side,
            constant,
            value_out,
        })
    }

    pub fn all_heads(w: &AttentionWeights, n_heads: usize, d_head: usize) -> Result<Vec<Self>> {
        (0..n_heads).map(|h| Self::new(w, h, d_head)).collect()
    }

    /// Query-key scores in filter form, scaled, without bias.
    pub fn filtered_scores(&self, x_q: &Matrix, x_kv: &Matrix, scale: f32) -> Result<Matrix> {
        let filtered = x_q.matmul(&self.w_qk)?;
        let mut scores = filtered.matmul_t(x_kv)?;
        let q_terms: Option<Vec<f32>> = self.query_side.as_ref().map(|u| mat_vec(x_q, u));
        let k_terms: Option<Vec<f32>> = self.key_side.as_ref().map(|w| mat_vec(x_kv, w));
        for i in 0..scores.rows() {
            for j in 0..scores.cols() {
                let mut s = scores.get(i, j) + self.constant;
                if let Some(q) = &q_terms {
                    s += q[i];
                }
                if let Some(k) = &k_terms {
                    s += k[j];
                }
                scores.set(i, j, s * scale);
            }
        }
        Ok(scores)
    }
}

/// Row-wise softmax of `pre`, masking keys beyond each query position when
/// causal.
pub fn attention_weights(pre: &Matrix, params: AttnParams) -> Result<Matrix> {
    let mut a = pre.clone();
    for i in 0..a.rows() {
        let row = a.row_mut(i);
        if params.causal {
            for x in row.iter_mut().skip(i + params.q_offset + 1) {
                *x += CAUSAL_MASK;
            }
        }
        softmax_in_place(row)?;
    }
    Ok(a)
}

fn zeros_or(bias: Option<&Matrix>, n: usize, m: usize) -> Result<Matrix> {
    match bias {
        Some(b) if b.shape() != (n, m) => Err(Error::DimMismatch(format!(
            "bias {:?} for {n}x{m} attention",
            b.shape()
        ))),
        Some(b) => Ok(b.clone()),
        None => Ok(Matrix::zeros(n, m)),
    }
}

fn finish_trace(scores: Matrix, bias: Matrix, params: AttnParams) -> Result<HeadTrace> {
    let pre_softmax = scores.add(&bias)?;
    let weights = attention_weights(&pre_softmax, params)?;
    Ok(HeadTrace {
        scores,
        bias,
        pre_softmax,
        weights,
    })
}

/// Refactored single head: `O_h = A_h · (X_kv W_vo,h)`.
pub fn attention_head(
    view: &AttentionHeadView,
    x_q: &Matrix,
    x_kv: &Matrix,
    bias: Option<&Matrix>,
    params: AttnParams,
) -> Result<(Matrix, HeadTrace)> {
    if x_kv.is_empty() {
        return Err(Error::EmptySequence);
    }
    let scores = view.filtered_scores(x_q, x_kv, params.scale)?;
    let bias = zeros_or(bias, x_q.rows(), x_kv.rows())?;
    let trace = finish_trace(scores, bias, params)?;
    let values = x_kv.matmul(&view.w_vo)?;
    let mut out = trace.weights.matmul(&values)?;
    if let Some(vb) = &view.value_out {
        out.add_row_broadcast(vb)?;
    }
    Ok((out, trace))
}

/// `Σ_h O_h + b_o` over precomputed head views.
pub fn multi_head_attention_refactored(
    views: &[AttentionHeadView],
    out_bias: Option<&[f32]>,
    x_q: &Matrix,
    x_kv: &Matrix,
    biases: Option<&[Matrix]>,
    params: AttnParams,
    keep_trace: bool,
) -> Result<(Matrix, Option<Vec<HeadTrace>>)> {
    let mut total = Matrix::zeros(x_q.rows(), x_q.cols());
    let mut traces = keep_trace.then(Vec::new);
    for (h, view) in views.iter().enumerate() {
        let (o, t) = attention_head(view, x_q, x_kv, biases.map(|b| &b[h]), params)?;
        total.add_assign(&o)?;
        if let Some(ts) = traces.as_mut() {
            ts.push(t);
        }
    }
    if let Some(bo) = out_bias {
        total.add_row_broadcast(bo)?;
    }
    Ok((total, traces))
}

/// `X W + b`.
pub fn project(x: &Matrix, w: &Matrix, b: Option<&[f32]>) -> Result<Matrix> {
    let mut y = x.matmul(w)?;
    if let Some(b) = b {
        y.add_row_broadcast(b)?;
    }
    Ok(y)
}

/// Attention over already projected queries, keys and values; heads are
/// column blocks of width `d_head`. Returns the concatenated head contexts
/// (before `W_o`).
pub fn attend_projected(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    n_heads: usize,
    biases: Option<&[Matrix]>,
    params: AttnParams,
    keep_trace: bool,
) -> Result<(Matrix, Option<Vec<HeadTrace>>)> {
    let (n, m) = (q.rows(), k.rows());
    if m == 0 {
        return Err(Error::EmptySequence);
    }
    let d_model = q.cols();
    let d_head = d_model / n_heads;
    let mut concat = Matrix::zeros(n, d_model);
    let mut traces = keep_trace.then(Vec::new);
    for h in 0..n_heads {
        let cols = h * d_head..(h + 1) * d_head;
        let mut scores = Matrix::zeros(n, m);
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            for j in 0..m {
                scores.set(i, j, inner(qi, &k.row(j)[cols.clone()]) * params.scale);
            }
        }
        let bias = zeros_or(biases.map(|b| &b[h]), n, m)?;
        let trace = finish_trace(scores, bias, params)?;
        for i in 0..n {
            let a = trace.weights.row(i);
            let out = &mut concat.row_mut(i)[cols.clone()];
            for (j, &w) in a.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (o, &x) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += w * x;
                }
            }
        }
        if let Some(ts) = traces.as_mut() {
            ts.push(trace);
        }
    }
    Ok((concat, traces))
}

/// Reference path: `[A_1 V_1 ⋯ A_H V_H] W_o + b_o`.
pub fn multi_head_attention_standard(
    w: &AttentionWeights,
    n_heads: usize,
    x_q: &Matrix,
    x_kv: &Matrix,
    biases: Option<&[Matrix]>,
    params: AttnParams,
    keep_trace: bool,
) -> Result<(Matrix, Option<Vec<HeadTrace>>)> {
    if x_kv.is_empty() {
        return Err(Error::EmptySequence);
    }
    let q = project(x_q, &w.wq, w.bq.as_deref())?;
    let k = project(x_kv, &w.wk, w.bk.as_deref())?;
    let v = project(x_kv, &w.wv, w.bv.as_deref())?;
    let (concat, traces) = attend_projected(&q, &k, &v, n_heads, biases, params, keep_trace)?;
    Ok((project(&concat, &w.wo, w.bo.as_deref())?, traces))
}
