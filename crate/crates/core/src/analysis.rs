//! Similarity maps, position kernels, self-bias statistics, attention
//! decompositions and raw vector export.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{PositionMode, StackKind};
use crate::model::attention::HeadTrace;
use crate::model::position::BucketSpec;
use crate::model::{AttentionKind, CheckpointTag, Model, TraceOptions};
use crate::numkern::{cosine, inner, rms_norm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMetric {
    Inner,
    Cosine,
    /// Inner product after a unit-scale rms norm of both operands.
    NormedInner,
}

impl SimMetric {
    pub fn name(self) -> &'static str {
        match self {
            SimMetric::Inner => "inner",
            SimMetric::Cosine => "cosine",
            SimMetric::NormedInner => "normed_inner",
        }
    }
}

impl std::str::FromStr for SimMetric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "inner" => Ok(SimMetric::Inner),
            "cosine" => Ok(SimMetric::Cosine),
            "normed_inner" => Ok(SimMetric::NormedInner),
            _ => Err(format!("unknown metric {s:?}, expected inner|cosine|normed_inner")),
        }
    }
}

/// `M[i][j] = metric(v_i, v_j)`. Only the upper triangle is computed and
/// mirrored, so the map is exactly symmetric.
pub fn similarity_map(vectors: &Matrix, metric: SimMetric) -> Result<Matrix> {
    let n = vectors.rows();
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    let normed;
    let rows = if metric == SimMetric::NormedInner {
        let ones = vec![1.0; vectors.cols()];
        let r = vectors
            .iter_rows()
            .map(|v| rms_norm(v, &ones, 0.0))
            .collect::<Result<Vec<_>>>()?;
        normed = Matrix::from_rows(&r)?;
        &normed
    } else {
        vectors
    };
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let s = match metric {
                SimMetric::Cosine => cosine(rows.row(i), rows.row(j))?,
                _ => inner(rows.row(i), rows.row(j)),
            };
            m.set(i, j, s);
            m.set(j, i, s);
        }
    }
    Ok(m)
}

/// Where a map's vectors came from, written as the file's comment line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MapSource {
    pub metric: String,
    pub stack: StackKind,
    pub layer: usize,
    pub tag: CheckpointTag,
}

impl MapSource {
    pub fn comment(&self) -> String {
        format!(
            "# metric={}, stack={}, layer={}, tag={}",
            self.metric, self.stack, self.layer, self.tag
        )
    }
}

/// Square map as CSV: a comment line, a header `row,0..n-1`, then one
/// record per row.
pub fn write_map_csv<W: Write>(mut out: W, comment: &str, m: &Matrix) -> Result<()> {
    writeln!(out, "{comment}")?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["row".to_owned()];
    header.extend((0..m.cols()).map(|j| j.to_string()));
    w.write_record(&header)?;
    for (i, r) in m.iter_rows().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(r.iter().map(f32::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Vectors the map for `ids` is built from: the first checkpoint with `tag`
/// (at `layer`, or the tag's only occurrence for `E` and `FinalNorm`).
pub fn checkpoint_vectors(
    model: &Model,
    ids: &[u32],
    stack: StackKind,
    layer: usize,
    tag: CheckpointTag,
) -> Result<Matrix> {
    let trace = run_traced(
        model,
        ids,
        stack,
        TraceOptions {
            checkpoints: true,
            ..TraceOptions::default()
        },
    )?;
    let layer = match tag {
        CheckpointTag::E => 0,
        CheckpointTag::FinalNorm => model.n_layers(stack),
        _ => layer,
    };
    trace
        .checkpoint(stack, layer, tag)
        .map(|c| c.vectors.clone())
        .ok_or_else(|| Error::LayerOutOfRange(format!("no {tag} checkpoint at {stack} layer {layer}")))
}

fn run_traced(model: &Model, ids: &[u32], stack: StackKind, opts: TraceOptions) -> Result<crate::model::ForwardTrace> {
    let raw = model.token_vectors(ids)?;
    Ok(match stack {
        StackKind::Enc => model.encode_traced(&raw, opts)?.1,
        StackKind::Dec => {
            let memory = if model.has_encoder() {
                Some(model.encode(&raw)?)
            } else {
                None
            };
            model.decode_sequence(memory.as_ref(), &raw, opts)?.1
        }
    })
}

/// One head's relative bias expanded over integer offsets.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PositionKernel {
    pub stack: StackKind,
    pub head: usize,
    pub offsets: Vec<i64>,
    pub buckets: Vec<usize>,
    pub values: Vec<f32>,
}

impl PositionKernel {
    pub fn value_at(&self, offset: i64) -> Option<f32> {
        self.offsets.iter().position(|&o| o == offset).map(|i| self.values[i])
    }
}

/// Offsets `-K..=K` for the encoder, `-K..=0` for the causal decoder.
pub fn position_kernel(model: &Model, stack: StackKind, head: usize, k: usize) -> Result<PositionKernel> {
    let cfg = model.config();
    if cfg.position_mode != PositionMode::RelativeBucketBias {
        return Err(Error::NoRelativeKernel);
    }
    let rel = model
        .bundle()
        .stack(stack)
        .and_then(|s| s.rel_bias.as_ref())
        .ok_or(Error::NoRelativeKernel)?;
    if head >= rel.rows() {
        return Err(Error::HeadOutOfRange {
            head,
            n_heads: rel.rows(),
        });
    }
    let spec = BucketSpec {
        num_buckets: cfg.rel_buckets,
        max_distance: cfg.rel_max_distance,
        bidirectional: stack == StackKind::Enc,
    };
    let k = k as i64;
    let offsets: Vec<i64> = match stack {
        StackKind::Enc => (-k..=k).collect(),
        StackKind::Dec => (-k..=0).collect(),
    };
    let buckets: Vec<usize> = offsets.iter().map(|&o| spec.bucket(o)).collect();
    let values = buckets.iter().map(|&b| rel.get(head, b)).collect();
    Ok(PositionKernel {
        stack,
        head,
        offsets,
        buckets,
        values,
    })
}

/// Kernels of every head of one stack.
pub fn stack_kernels(model: &Model, stack: StackKind, k: usize) -> Result<Vec<PositionKernel>> {
    (0..model.config().n_heads)
        .map(|h| position_kernel(model, stack, h, k))
        .collect()
}

/// `stack,head,offset,bucket,value`
pub fn write_kernels_csv<W: Write>(out: W, kernels: &[PositionKernel]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["stack", "head", "offset", "bucket", "value"])?;
    for k in kernels {
        for i in 0..k.offsets.len() {
            w.write_record([
                k.stack.to_string(),
                k.head.to_string(),
                k.offsets[i].to_string(),
                k.buckets[i].to_string(),
                k.values[i].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SelfBiasStat {
    pub head: usize,
    pub self_value: f32,
    /// Mean over offsets with `|offset| <= window` present in the kernel.
    pub window_mean: f32,
    pub negative: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelfBiasSummary {
    pub stats: Vec<SelfBiasStat>,
    /// Share of kernels with negative self-bias.
    pub fraction: f64,
}

pub fn self_bias_stat(kernel: &PositionKernel, window: usize) -> Result<SelfBiasStat> {
    let self_value = kernel
        .value_at(0)
        .ok_or_else(|| Error::Unsupported("kernel has no offset 0".into()))?;
    let w = window as i64;
    let (sum, n) = kernel
        .offsets
        .iter()
        .zip(&kernel.values)
        .filter(|(o, _)| o.abs() <= w)
        .fold((0.0f64, 0usize), |(s, n), (_, &v)| (s + f64::from(v), n + 1));
    let window_mean = (sum / n as f64) as f32;
    Ok(SelfBiasStat {
        head: kernel.head,
        self_value,
        window_mean,
        negative: self_value < window_mean,
    })
}

pub fn self_bias_stats(kernels: &[PositionKernel], window: usize) -> Result<SelfBiasSummary> {
    let stats = kernels
        .iter()
        .map(|k| self_bias_stat(k, window))
        .collect::<Result<Vec<_>>>()?;
    let fraction = if stats.is_empty() {
        0.0
    } else {
        stats.iter().filter(|s| s.negative).count() as f64 / stats.len() as f64
    };
    Ok(SelfBiasSummary { stats, fraction })
}

/// The four matrices of one head for `ids`, taken from the same forward
/// pass the model runs.
pub fn attention_decomposition(
    model: &Model,
    ids: &[u32],
    stack: StackKind,
    layer: usize,
    head: usize,
    kind: AttentionKind,
) -> Result<HeadTrace> {
    let n_layers = model.n_layers(stack);
    if layer >= n_layers {
        return Err(Error::LayerOutOfRange(format!("layer {layer} of {n_layers}")));
    }
    let n_heads = model.config().n_heads;
    if head >= n_heads {
        return Err(Error::HeadOutOfRange { head, n_heads });
    }
    let trace = run_traced(
        model,
        ids,
        stack,
        TraceOptions {
            attention: true,
            ..TraceOptions::default()
        },
    )?;
    trace
        .head(stack, layer, kind, head)
        .cloned()
        .ok_or_else(|| Error::Unsupported(format!("no {kind} attention in {stack} layer {layer}")))
}

/// Writes `{prefix}_{scores,bias,pre_softmax,weights}.csv`.
pub fn write_decomposition(prefix: &str, comment: &str, t: &HeadTrace) -> Result<Vec<std::path::PathBuf>> {
    let mut paths = Vec::new();
    for (name, m) in [
        ("scores", &t.scores),
        ("bias", &t.bias),
        ("pre_softmax", &t.pre_softmax),
        ("weights", &t.weights),
    ] {
        let path = std::path::PathBuf::from(format!("{prefix}_{name}.csv"));
        let f = std::io::BufWriter::new(std::fs::File::create(&path)?);
        write_map_csv(f, &format!("{comment}, matrix={name}"), m)?;
        paths.push(path);
    }
    Ok(paths)
}

/// `label,dim0..dimD-1`, one row per vector.
pub fn export_vectors<W: Write>(out: W, vectors: &Matrix, labels: &[String]) -> Result<()> {
    if labels.len() != vectors.rows() {
        return Err(Error::DimMismatch(format!(
            "{} labels for {} vectors",
            labels.len(),
            vectors.rows()
        )));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["label".to_owned()];
    header.extend((0..vectors.cols()).map(|i| format!("dim{i}")));
    w.write_record(&header)?;
    for (label, row) in labels.iter().zip(vectors.iter_rows()) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(f32::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`export_vectors`].
pub fn read_vectors<R: BufRead>(input: R) -> Result<(Vec<String>, Matrix)> {
    let mut r = csv::Reader::from_reader(input);
    let width = r.headers()?.len().saturating_sub(1);
    let mut labels = Vec::new();
    let mut m = Matrix::empty(width);
    for rec in r.records() {
        let rec = rec?;
        labels.push(rec.get(0).unwrap_or_default().to_owned());
        let row = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.parse::<f32>()
                    .map_err(|e| Error::MalformedTensor(format!("{s:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        m.push_row(&row)?;
    }
    Ok((labels, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::ModelConfig;
    use crate::model::position::relative_position_bucket;
    use crate::synth::{normal_matrix, random_bundle, rng};

    fn kernel(head: usize, offsets: std::ops::RangeInclusive<i64>, f: impl Fn(i64) -> f32) -> PositionKernel {
        let offsets: Vec<i64> = offsets.collect();
        PositionKernel {
            stack: StackKind::Enc,
            head,
            buckets: vec![0; offsets.len()],
            values: offsets.iter().map(|&o| f(o)).collect(),
            offsets,
        }
    }

    #[test]
    fn orthonormal_rows_give_identity_inner_map() {
        let m = similarity_map(&Matrix::identity(4), SimMetric::Inner).unwrap();
        assert_eq!(m, Matrix::identity(4));
    }

    #[test]
    fn maps_are_symmetric_and_cosine_has_unit_diagonal() {
        let v = normal_matrix(&mut rng(1), 6, 5, 1.0);
        for metric in [SimMetric::Inner, SimMetric::Cosine, SimMetric::NormedInner] {
            let m = similarity_map(&v, metric).unwrap();
            assert_eq!(m, m.transpose());
        }
        let c = similarity_map(&v, SimMetric::Cosine).unwrap();
        for i in 0..6 {
            assert!((c.get(i, i) - 1.0).abs() <= 1e-5);
        }
        let direct = v.matmul(&v.transpose()).unwrap();
        assert!(similarity_map(&v, SimMetric::Inner).unwrap().max_abs_diff(&direct) <= 1e-5);
        let dup = Matrix::vstack(&[&v, &v.slice_rows(2, 3)]).unwrap();
        let c = similarity_map(&dup, SimMetric::Cosine).unwrap();
        assert!((c.get(2, 6) - 1.0).abs() <= 1e-6);
        let zero = Matrix::zeros(2, 3);
        assert!(matches!(
            similarity_map(&zero, SimMetric::Cosine),
            Err(Error::ZeroNormCosine)
        ));
    }

    #[test]
    fn normed_inner_rescales_rows_to_unit_rms() {
        let v = Matrix::new(1, 2, vec![3.0, 4.0]).unwrap();
        let m = similarity_map(&v, SimMetric::NormedInner).unwrap();
        // rms-normed rows have mean square one, so the self product is D
        assert!((m.get(0, 0) - 2.0).abs() <= 1e-6);
    }

    fn relative_model(seed: u64) -> Model {
        Model::new(random_bundle(&ModelConfig::t5_like(10, 8, 4, 2), seed)).unwrap()
    }

    #[test]
    fn zero_bias_gives_flat_kernel() {
        let mut b = random_bundle(&ModelConfig::t5_like(10, 8, 4, 2), 2);
        b.weights.encoder.as_mut().unwrap().rel_bias = Some(Matrix::zeros(4, 32));
        let m = Model::new(b).unwrap();
        let k = position_kernel(&m, StackKind::Enc, 1, 64).unwrap();
        assert_eq!(k.offsets.len(), 129);
        assert!(k.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_bucket_kernel_is_its_offset_class_indicator() {
        let mut b = random_bundle(&ModelConfig::t5_like(10, 8, 4, 2), 3);
        let mut rel = Matrix::zeros(4, 32);
        rel.set(2, 12, 1.0);
        b.weights.encoder.as_mut().unwrap().rel_bias = Some(rel);
        let m = Model::new(b).unwrap();
        let k = position_kernel(&m, StackKind::Enc, 2, 64).unwrap();
        for (&o, &v) in k.offsets.iter().zip(&k.values) {
            let expect = if (-45..=-32).contains(&o) { 1.0 } else { 0.0 };
            assert_eq!(v, expect, "offset {o}");
        }
    }

    #[test]
    fn decoder_kernel_is_one_sided_and_plateaus_follow_buckets() {
        let m = relative_model(4);
        let k = position_kernel(&m, StackKind::Dec, 0, 64).unwrap();
        assert_eq!(k.offsets.first(), Some(&-64));
        assert_eq!(k.offsets.last(), Some(&0));
        for i in 0..k.offsets.len() {
            for j in 0..k.offsets.len() {
                let (a, b) = (k.offsets[i], k.offsets[j]);
                if relative_position_bucket(a, false, 32, 128) == relative_position_bucket(b, false, 32, 128) {
                    assert_eq!(k.values[i], k.values[j]);
                }
            }
        }
    }

    #[test]
    fn learned_positions_have_no_kernel() {
        let m = Model::new(random_bundle(&ModelConfig::gpt2_like(10, 8, 2, 1), 5)).unwrap();
        assert!(matches!(
            position_kernel(&m, StackKind::Dec, 0, 8),
            Err(Error::NoRelativeKernel)
        ));
    }

    #[test]
    fn self_bias_classification() {
        let flat: Vec<_> = (0..4).map(|h| kernel(h, -64..=64, |_| 0.3)).collect();
        assert_eq!(self_bias_stats(&flat, 8).unwrap().fraction, 0.0);
        let mixed: Vec<_> = (0..4)
            .map(|h| kernel(h, -64..=64, move |o| if o == 0 && h < 3 { -1.0 } else { 0.0 }))
            .collect();
        // three heads at -1 against a zero surround: window mean is -1/17
        let s = self_bias_stats(&mixed, 8).unwrap();
        assert_eq!(s.fraction, 0.75);
        assert!((s.stats[0].window_mean + 1.0 / 17.0).abs() < 1e-7);
    }

    #[test]
    fn reference_self_bias_values() {
        // encoder head with self bias -0.66 among larger neighbours
        let enc = kernel(0, -64..=64, |o| if o == 0 { -0.66 } else { 0.5 });
        assert!(self_bias_stat(&enc, 8).unwrap().negative);
        // decoder head with self bias +2.12 above its neighbours
        let dec = kernel(0, -64..=0, |o| if o == 0 { 2.12 } else { 0.4 });
        let s = self_bias_stat(&dec, 8).unwrap();
        assert!(!s.negative);
        assert!((s.window_mean - (2.12 + 8.0 * 0.4) / 9.0).abs() < 1e-6);
    }

    #[test]
    fn decomposition_shares_the_model_path() {
        let m = relative_model(6);
        let ids = [1, 4, 2, 7];
        let t = attention_decomposition(&m, &ids, StackKind::Enc, 1, 3, AttentionKind::SelfEnc).unwrap();
        assert_eq!(t.pre_softmax, t.scores.add(&t.bias).unwrap());
        for i in 0..4 {
            let s: f32 = t.weights.row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-5);
            let p = crate::numkern::softmax(t.pre_softmax.row(i)).unwrap();
            assert_eq!(p.as_slice(), t.weights.row(i));
        }
        let one = attention_decomposition(&m, &[5], StackKind::Dec, 0, 0, AttentionKind::SelfDec).unwrap();
        assert_eq!(one.weights.data(), &[1.0]);
        let cross = attention_decomposition(&m, &ids, StackKind::Dec, 0, 1, AttentionKind::Cross).unwrap();
        assert!(cross.bias.data().iter().all(|&b| b == 0.0));
        assert_eq!(cross.pre_softmax, cross.scores);
        assert!(attention_decomposition(&m, &ids, StackKind::Enc, 2, 0, AttentionKind::SelfEnc).is_err());
    }

    #[test]
    fn vectors_round_trip_through_csv() {
        let v = normal_matrix(&mut rng(7), 5, 3, 1.0);
        let labels: Vec<String> = ["a", "b,c", "\"q\"", "d", "e"].iter().map(|s| s.to_string()).collect();
        let mut buf = Vec::new();
        export_vectors(&mut buf, &v, &labels).unwrap();
        let (l, back) = read_vectors(buf.as_slice()).unwrap();
        assert_eq!(l, labels);
        assert_eq!(back, v);
        assert!(export_vectors(Vec::new(), &v, &labels[..2]).is_err());
    }

    #[test]
    fn map_csv_carries_its_source_comment() {
        let src = MapSource {
            metric: "cosine".into(),
            stack: StackKind::Enc,
            layer: 0,
            tag: CheckpointTag::E,
        };
        let mut buf = Vec::new();
        write_map_csv(&mut buf, &src.comment(), &Matrix::identity(2)).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "# metric=cosine, stack=enc, layer=0, tag=E\nrow,0,1\n0,1,0\n1,0,1\n"
        );
    }
}
