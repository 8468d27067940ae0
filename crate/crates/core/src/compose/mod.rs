//! Pyramidal concept composition (words, then segments, then examples) and
//! the two multiple-choice procedures built on it.

pub mod scheme;

use std::ops::Range;

pub use scheme::{
    CompositionScheme, EncodingScheme, ExampleAgg, LayerSelector, Norm, Pool, SegmentAgg, Similarity, TestKind,
    WordAgg, WordFilter,
};

use crate::error::{Error, Result};
use crate::io::{McInstance, Section};
use crate::model::{Model, TraceOptions};
use crate::numkern::{argmax_f64, cosine, inner, softmax, Activation, Matrix};

/// Vectors for `ids` at the selected layer of the context stack (the
/// encoder, or the causal decoder of a decoder-only model).
pub fn encoding_layer_vectors(model: &Model, ids: &[u32], selector: LayerSelector) -> Result<Matrix> {
    let stack = model.context_stack();
    match selector.resolve(model.n_layers(stack))? {
        None => model.token_vectors(ids),
        Some(layer) => {
            let opts = TraceOptions {
                stop_before_layer: Some(layer),
                ..TraceOptions::default()
            };
            Ok(model.run_stack(stack, model.embed(ids)?, None, opts)?.0)
        }
    }
}

fn filter(act: Activation, f: WordFilter, x: f32) -> f32 {
    match f {
        WordFilter::Identity => x,
        WordFilter::Act => act.apply(x),
        WordFilter::NegAct => -act.apply(-x),
        WordFilter::ActPlus => x + act.apply(x),
        WordFilter::NegActPlus => x - act.apply(-x),
    }
}

/// Weighted sum with weights given per row, accumulated in `f64`.
fn weighted_sum(vectors: &Matrix, weights: &[f64]) -> Vec<f32> {
    let mut acc = vec![0.0f64; vectors.cols()];
    for (row, &w) in vectors.iter_rows().zip(weights) {
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += w * f64::from(x);
        }
    }
    acc.into_iter().map(|x| x as f32).collect()
}

pub fn mean(vectors: &Matrix) -> Result<Vec<f32>> {
    let n = vectors.rows();
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    Ok(weighted_sum(vectors, &vec![1.0 / n as f64; n]))
}

/// Collapses a segment's vectors into one. `causal` says whether the
/// vectors come from a causal stack (required by `last`).
pub fn aggregate_words(vectors: &Matrix, agg: WordAgg, act: Activation, causal: bool) -> Result<Vec<f32>> {
    let n = vectors.rows();
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    match agg {
        WordAgg::Last if !causal => Err(Error::InvalidScheme("last only valid for causal stacks".into())),
        WordAgg::Last => Ok(vectors.row(n - 1).to_vec()),
        WordAgg::Pooled(f, pool) => {
            let filtered;
            let v = if f == WordFilter::Identity {
                vectors
            } else {
                let mut m = vectors.clone();
                for i in 0..n {
                    for x in m.row_mut(i) {
                        *x = filter(act, f, *x);
                    }
                }
                filtered = m;
                &filtered
            };
            let weights: Vec<f64> = match pool {
                Pool::Mean => vec![1.0 / n as f64; n],
                // i/N renormalized: 2i / (N (N + 1))
                Pool::W1Mean => {
                    let z = (n * (n + 1)) as f64;
                    (1..=n).map(|i| 2.0 * i as f64 / z).collect()
                }
            };
            Ok(weighted_sum(v, &weights))
        }
    }
}

pub fn apply_norm(v: &mut [f32], norm: Norm) -> Result<()> {
    if norm == Norm::None {
        return Ok(());
    }
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let (center, denom) = match norm {
        Norm::L2 => (0.0, v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt()),
        Norm::VarNorm | Norm::ZNorm => {
            let var = v.iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>() / n;
            let c = if norm == Norm::ZNorm { mean } else { 0.0 };
            (c, var.sqrt())
        }
        Norm::None => unreachable!(),
    };
    if denom <= 0.0 || !denom.is_finite() {
        return Err(Error::DegenerateNorm);
    }
    for x in v.iter_mut() {
        *x = ((f64::from(*x) - center) / denom) as f32;
    }
    Ok(())
}

/// Composite vectors plus, for each, the span of context token positions
/// (in [`McInstance::context_ids`] order) it aggregates.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSeq {
    pub vectors: Matrix,
    pub provenance: Vec<Range<usize>>,
    /// Example aggregation still pending because it depends on the choice.
    pub soft_cluster: bool,
}

/// A segment: contiguous context tokens encoded together.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub ids: Vec<u32>,
    pub span: Range<usize>,
}

/// Splits the context into examples of segments per the encoding scheme.
pub fn segment(instance: &McInstance, scheme: EncodingScheme) -> Result<Vec<Vec<Segment>>> {
    let mut pos = 0usize;
    let mut take = |ids: Vec<u32>| {
        let span = pos..pos + ids.len();
        pos += ids.len();
        Segment { ids, span }
    };
    let section_ids = |s: &Section| s.token_ids().collect::<Vec<u32>>();
    let mut examples: Vec<Vec<Segment>> = Vec::new();
    for ex in instance.context_examples() {
        let segs: Vec<Segment> = match scheme {
            EncodingScheme::SentenceLevelSegmentation => {
                let mut v = Vec::new();
                for s in ex {
                    if s.sentences.is_empty() {
                        return Err(Error::SchemeMismatch(format!(
                            "section {:?} of {} has no sentence splits",
                            s.role, instance.id
                        )));
                    }
                    v.extend(s.sentences.iter().map(|sent| take(sent.clone())));
                }
                v
            }
            EncodingScheme::SegmentEachExample | EncodingScheme::MergeAllSegments => {
                ex.iter().map(|s| take(section_ids(s))).collect()
            }
            EncodingScheme::ConcatEachExample | EncodingScheme::ConcatAllExamples | EncodingScheme::CrossEncoding => {
                vec![take(ex.iter().flat_map(section_ids).collect())]
            }
        };
        examples.push(segs.into_iter().filter(|s| !s.ids.is_empty()).collect());
    }
    examples.retain(|e| !e.is_empty());
    match scheme {
        EncodingScheme::MergeAllSegments => Ok(vec![examples.into_iter().flatten().collect()]),
        EncodingScheme::ConcatAllExamples => {
            let segs: Vec<Segment> = examples.into_iter().flatten().collect();
            if segs.is_empty() {
                return Ok(Vec::new());
            }
            let span = segs[0].span.start..segs[segs.len() - 1].span.end;
            let ids = segs.into_iter().flat_map(|s| s.ids).collect();
            Ok(vec![vec![Segment { ids, span }]])
        }
        _ => Ok(examples),
    }
}

fn span_of(parts: &[Range<usize>]) -> Range<usize> {
    parts.first().map_or(0, |f| f.start)..parts.last().map_or(0, |l| l.end)
}

/// Runs the pyramid for the context of `instance`.
pub fn segment_and_compose(model: &Model, instance: &McInstance, scheme: &CompositionScheme) -> Result<ConceptSeq> {
    let causal = !model.has_encoder();
    if scheme.encoding_scheme == EncodingScheme::CrossEncoding {
        let ids = instance.context_ids();
        return Ok(ConceptSeq {
            vectors: model.token_vectors(&ids)?,
            provenance: (0..ids.len()).map(|i| i..i + 1).collect(),
            soft_cluster: false,
        });
    }
    let act = model.config().activation;
    let d = model.config().d_model;
    let mut vectors = Matrix::empty(d);
    let mut provenance = Vec::new();
    for example in segment(instance, scheme.encoding_scheme)? {
        let mut seg_vecs = Matrix::empty(d);
        let mut seg_spans = Vec::new();
        for seg in &example {
            let enc = encoding_layer_vectors(model, &seg.ids, scheme.encoding_layer)?;
            let mut v = aggregate_words(&enc, scheme.word_agg, act, causal)?;
            apply_norm(&mut v, scheme.norm)?;
            seg_vecs.push_row(&v)?;
            seg_spans.push(seg.span.clone());
        }
        match scheme.segment_agg {
            SegmentAgg::Mean => {
                let mut v = mean(&seg_vecs)?;
                apply_norm(&mut v, scheme.norm)?;
                vectors.push_row(&v)?;
                provenance.push(span_of(&seg_spans));
            }
            SegmentAgg::None => {
                vectors = Matrix::vstack(&[&vectors, &seg_vecs])?;
                provenance.extend(seg_spans);
            }
        }
    }
    match scheme.example_agg {
        ExampleAgg::Mean if !vectors.is_empty() => {
            let mut v = mean(&vectors)?;
            apply_norm(&mut v, scheme.norm)?;
            Ok(ConceptSeq {
                vectors: Matrix::new(1, d, v)?,
                provenance: vec![span_of(&provenance)],
                soft_cluster: false,
            })
        }
        agg => Ok(ConceptSeq {
            vectors,
            provenance,
            soft_cluster: agg == ExampleAgg::SoftCluster,
        }),
    }
}

/// Per-choice scores and the winning index (lowest index on ties).
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceScores {
    pub scores: Vec<f64>,
    pub chosen: usize,
}

impl ChoiceScores {
    fn from_scores(scores: Vec<f64>) -> Result<Self> {
        let chosen = argmax_f64(&scores)?;
        Ok(Self { scores, chosen })
    }
}

fn check_choices(instance: &McInstance) -> Result<()> {
    match instance.choices.iter().position(Vec::is_empty) {
        Some(i) => Err(Error::EmptyChoice(i)),
        None if instance.choices.is_empty() => Err(Error::NoInstances),
        None => Ok(()),
    }
}

/// `Σ_t log P(choice_t | prefix, choice_<t)` given the context as vectors.
/// Encoder-decoder models encode `context` and decode `[start ‖ choice]`;
/// decoder-only models read `[context ‖ choice]`, so the first choice token
/// is predicted from the last context row.
pub fn score_choices(
    model: &Model,
    context: &Matrix,
    instance: &McInstance,
    length_norm: bool,
) -> Result<ChoiceScores> {
    check_choices(instance)?;
    if context.is_empty() {
        return Err(Error::EmptySequence);
    }
    let start = model.token_vectors(&[model.config().start_token_id])?;
    let memory = if model.has_encoder() {
        Some(model.encode(context)?)
    } else {
        None
    };
    let scores = instance
        .choices
        .iter()
        .map(|choice| {
            let choice_rows = model.token_vectors(choice)?;
            let (raw, first) = match &memory {
                Some(_) => (Matrix::vstack(&[&start, &choice_rows])?, 0),
                None => (Matrix::vstack(&[context, &choice_rows])?, context.rows() - 1),
            };
            let picks: Vec<(usize, u32)> = choice.iter().enumerate().map(|(t, &w)| (first + t, w)).collect();
            let lp: f64 = model.token_log_probs(memory.as_ref(), &raw, &picks)?.into_iter().sum();
            Ok(if length_norm { lp / choice.len() as f64 } else { lp })
        })
        .collect::<Result<Vec<_>>>()?;
    ChoiceScores::from_scores(scores)
}

/// Standard full-token evaluation of one instance.
pub fn baseline_choice(model: &Model, instance: &McInstance, length_norm: bool) -> Result<ChoiceScores> {
    let context = model.token_vectors(&instance.context_ids())?;
    score_choices(model, &context, instance, length_norm)
}

/// Test 1: the composed context replaces the context tokens; choices are
/// scored by their joint log-probability.
pub fn test1_pyramidal_generation(
    model: &Model,
    instance: &McInstance,
    scheme: &CompositionScheme,
    length_norm: bool,
) -> Result<ChoiceScores> {
    scheme.validate_for(TestKind::Test1, !model.has_encoder())?;
    let concepts = segment_and_compose(model, instance, scheme)?;
    score_choices(model, &concepts.vectors, instance, length_norm)
}

fn similarity(a: &[f32], b: &[f32], s: Similarity) -> Result<f64> {
    match s {
        Similarity::Dot => Ok(f64::from(inner(a, b))),
        Similarity::Cosine => Ok(f64::from(cosine(a, b)?)),
        Similarity::None => Err(Error::InvalidScheme(
            "Test 2 needs SIMILARITY_FUNC dot or cosine".into(),
        )),
    }
}

/// Softmax of dot products with `choice`, used as mixing weights.
pub fn soft_cluster_weights(context: &Matrix, choice: &[f32]) -> Result<Vec<f32>> {
    let logits: Vec<f32> = context.iter_rows().map(|r| inner(r, choice)).collect();
    softmax(&logits)
}

/// A choice as one segment at the output layer selection.
pub fn choice_vector(model: &Model, choice: &[u32], scheme: &CompositionScheme) -> Result<Vec<f32>> {
    let enc = encoding_layer_vectors(model, choice, scheme.out_encoding_layer)?;
    let mut v = aggregate_words(
        &enc,
        scheme.out_word_agg,
        model.config().activation,
        !model.has_encoder(),
    )?;
    apply_norm(&mut v, scheme.norm)?;
    Ok(v)
}

/// Test 2: context and choices become vectors; the best similarity over
/// the context sequence scores each choice.
pub fn test2_concept_similarity(
    model: &Model,
    instance: &McInstance,
    scheme: &CompositionScheme,
) -> Result<ChoiceScores> {
    scheme.validate_for(TestKind::Test2, !model.has_encoder())?;
    check_choices(instance)?;
    let ctx = segment_and_compose(model, instance, scheme)?;
    if ctx.vectors.is_empty() {
        return Err(Error::EmptySequence);
    }
    let scores = instance
        .choices
        .iter()
        .map(|choice| {
            let c = choice_vector(model, choice, scheme)?;
            if ctx.soft_cluster {
                let w: Vec<f64> = soft_cluster_weights(&ctx.vectors, &c)?
                    .into_iter()
                    .map(f64::from)
                    .collect();
                let mut v = weighted_sum(&ctx.vectors, &w);
                apply_norm(&mut v, scheme.norm)?;
                similarity(&v, &c, scheme.similarity)
            } else {
                ctx.vectors
                    .iter_rows()
                    .map(|r| similarity(r, &c, scheme.similarity))
                    .try_fold(f64::NEG_INFINITY, |m, s| s.map(|s| m.max(s)))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    ChoiceScores::from_scores(scores)
}
