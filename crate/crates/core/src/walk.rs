//! Encoding and decoding walks, and where they sit relative to the
//! vocabulary.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::StackKind;
use crate::model::{CheckpointTag, Model, TraceOptions};
use crate::numkern::{cosine, inner, Matrix};

/// One position's vector at one named point of a stack.
#[derive(Clone, Debug, PartialEq)]
pub struct WalkCheckpoint {
    pub stack: StackKind,
    pub layer: usize,
    pub tag: CheckpointTag,
    pub position: usize,
    pub vector: Vec<f32>,
}

/// Every checkpoint a forward pass over `ids` records for `stack`, in
/// stack order, sliced to `position`.
///
/// The decoder stack of an encoder-decoder model reads `ids` as its own
/// input with `encode(ids)` as memory.
pub fn trace_encoding_walk(
    model: &Model,
    ids: &[u32],
    position: usize,
    stack: StackKind,
) -> Result<Vec<WalkCheckpoint>> {
    if position >= ids.len() {
        return Err(Error::PositionOutOfRange {
            position,
            len: ids.len(),
        });
    }
    let opts = TraceOptions {
        checkpoints: true,
        ..TraceOptions::default()
    };
    let raw = model.token_vectors(ids)?;
    let trace = match stack {
        StackKind::Enc => model.encode_traced(&raw, opts)?.1,
        StackKind::Dec => {
            let memory = if model.has_encoder() {
                Some(model.encode(&raw)?)
            } else {
                None
            };
            model.decode_sequence(memory.as_ref(), &raw, opts)?.1
        }
    };
    Ok(trace
        .checkpoints
        .into_iter()
        .map(|c| WalkCheckpoint {
            stack: c.stack,
            layer: c.layer,
            tag: c.tag,
            position,
            vector: c.vectors.row(position).to_vec(),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Inner,
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "inner" => Ok(Metric::Inner),
            "cosine" => Ok(Metric::Cosine),
            _ => Err(format!("unknown metric {s:?}, expected inner|cosine")),
        }
    }
}

/// Which token vectors a neighborhood is measured against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    /// The input embedding rows.
    #[default]
    Input,
    /// The rows that produce logits (differs only for untied models).
    Output,
}

fn space_matrix(model: &Model, space: Space) -> &Matrix {
    match space {
        Space::Input => &model.bundle().vocab.embedding,
        Space::Output => model.bundle().unembedding(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub token_id: u32,
    pub similarity: f32,
}

/// Exhaustive top-`k` scan, similarity descending, ties by token id.
pub fn nearest_tokens(model: &Model, v: &[f32], k: usize, metric: Metric, space: Space) -> Result<Vec<Neighbor>> {
    let rows = space_matrix(model, space);
    if k == 0 || k > rows.rows() {
        return Err(Error::Unsupported(format!("k={k} outside 1..={}", rows.rows())));
    }
    if v.len() != rows.cols() {
        return Err(Error::DimMismatch(format!(
            "vector of {} vs width {}",
            v.len(),
            rows.cols()
        )));
    }
    let mut all = rows
        .iter_rows()
        .enumerate()
        .map(|(i, r)| {
            let similarity = match metric {
                Metric::Inner => inner(v, r),
                Metric::Cosine => cosine(v, r)?,
            };
            Ok(Neighbor {
                token_id: i as u32,
                similarity,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    all.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.token_id.cmp(&b.token_id)));
    all.truncate(k);
    Ok(all)
}

/// Whether `w` is the closest token to `v` by inner product against the
/// rows that score next tokens.
pub fn in_neighborhood(model: &Model, v: &[f32], w: u32) -> Result<bool> {
    let vocab = model.config().vocab_size;
    if w as usize >= vocab {
        return Err(Error::TokenOutOfRange {
            id: w,
            vocab_size: vocab,
        });
    }
    Ok(nearest_tokens(model, v, 1, Metric::Inner, Space::Output)?[0].token_id == w)
}

/// Element `i` tells whether `walk[i]` lies in the neighborhood of
/// `targets[i]`.
pub fn target_path_check(model: &Model, walk: &[Vec<f32>], targets: &[u32]) -> Result<Vec<bool>> {
    if walk.len() != targets.len() {
        return Err(Error::DimMismatch(format!(
            "walk of {} vs {} targets",
            walk.len(),
            targets.len()
        )));
    }
    walk.iter()
        .zip(targets)
        .map(|(v, &t)| in_neighborhood(model, v, t))
        .collect()
}

/// `stack,layer,tag,position,dim0..dimD-1`
pub fn write_walk_csv<W: Write>(out: W, walk: &[WalkCheckpoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = walk.first().map_or(0, |c| c.vector.len());
    let mut header = vec!["stack".to_owned(), "layer".into(), "tag".into(), "position".into()];
    header.extend((0..d).map(|i| format!("dim{i}")));
    w.write_record(&header)?;
    for c in walk {
        let mut rec = vec![
            c.stack.to_string(),
            c.layer.to_string(),
            c.tag.to_string(),
            c.position.to_string(),
        ];
        rec.extend(c.vector.iter().map(f32::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Decoding walk rows: `step,token_id,dim0..`, one per step.
pub fn write_decode_csv<W: Write>(out: W, tokens: &[u32], walk: &[Vec<f32>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = walk.first().map_or(0, Vec::len);
    let mut header = vec!["step".to_owned(), "token_id".into()];
    header.extend((0..d).map(|i| format!("dim{i}")));
    w.write_record(&header)?;
    for (step, (t, v)) in tokens.iter().zip(walk).enumerate() {
        let mut rec = vec![step.to_string(), t.to_string()];
        rec.extend(v.iter().map(f32::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `token_id,token,similarity,rank` with rank starting at 1.
pub fn write_neighbors_csv<W: Write>(out: W, model: &Model, neighbors: &[Neighbor]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["token_id", "token", "similarity", "rank"])?;
    for (rank, n) in neighbors.iter().enumerate() {
        w.write_record([
            n.token_id.to_string(),
            model.bundle().vocab.tokens[n.token_id as usize].clone(),
            n.similarity.to_string(),
            (rank + 1).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::ModelConfig;
    use crate::model::Policy;
    use crate::synth::{normal_vec, random_bundle, residual_identity_bundle, rng};

    fn model(seed: u64) -> Model {
        Model::new(random_bundle(&ModelConfig::t5_like(16, 8, 2, 2), seed)).unwrap()
    }

    #[test]
    fn residual_identity_walk_stays_on_the_token() {
        let cfg = ModelConfig::t5_like(16, 8, 2, 2);
        let m = Model::new(residual_identity_bundle(&cfg, 1)).unwrap();
        let ids = [3, 9, 4];
        let walk = trace_encoding_walk(&m, &ids, 1, StackKind::Enc).unwrap();
        let w = m.bundle().vocab.embedding.row(9);
        for c in &walk {
            match c.tag {
                CheckpointTag::PostSA | CheckpointTag::PostFF | CheckpointTag::E => {
                    assert_eq!(c.vector, w, "{:?}", c.tag)
                }
                _ => {}
            }
        }
    }

    #[test]
    fn checkpoint_e_is_the_embedding_row_and_order_is_fixed() {
        let m = model(2);
        let ids = [1, 2, 3, 4];
        let walk = trace_encoding_walk(&m, &ids, 2, StackKind::Enc).unwrap();
        assert_eq!(walk[0].tag, CheckpointTag::E);
        assert_eq!(walk[0].vector, m.embed(&ids).unwrap().row(2));
        let expect = [
            CheckpointTag::E,
            CheckpointTag::NormSA,
            CheckpointTag::PostSA,
            CheckpointTag::NormFF,
            CheckpointTag::PostFF,
            CheckpointTag::NormSA,
            CheckpointTag::PostSA,
            CheckpointTag::NormFF,
            CheckpointTag::PostFF,
            CheckpointTag::FinalNorm,
        ];
        assert_eq!(walk.iter().map(|c| c.tag).collect::<Vec<_>>(), expect);
        assert_eq!(walk.last().unwrap().vector, m.encode_ids(&ids).unwrap().row(2));
        let dec = trace_encoding_walk(&m, &ids, 0, StackKind::Dec).unwrap();
        assert!(dec.iter().any(|c| c.tag == CheckpointTag::PostXA));
        assert!(trace_encoding_walk(&m, &ids, 4, StackKind::Enc).is_err());
    }

    #[test]
    fn self_similarity_and_full_permutation() {
        let m = model(3);
        let e = &m.bundle().vocab.embedding;
        for j in 0..16 {
            let top = nearest_tokens(&m, e.row(j), 1, Metric::Cosine, Space::Input).unwrap();
            assert_eq!(top[0].token_id, j as u32);
        }
        let all = nearest_tokens(&m, e.row(0), 16, Metric::Inner, Space::Input).unwrap();
        let mut ids: Vec<u32> = all.iter().map(|n| n.token_id).collect();
        assert!(all.windows(2).all(|w| w[0].similarity >= w[1].similarity));
        ids.sort_unstable();
        assert_eq!(ids, (0..16).collect::<Vec<_>>());
        assert!(nearest_tokens(&m, e.row(0), 0, Metric::Inner, Space::Input).is_err());
    }

    #[test]
    fn top_k_matches_brute_force_rescan() {
        let m = model(4);
        let e = &m.bundle().vocab.embedding;
        let mut r = rng(5);
        for _ in 0..10 {
            let v = normal_vec(&mut r, 8, 1.0);
            let got = nearest_tokens(&m, &v, 5, Metric::Inner, Space::Input).unwrap();
            // selection by repeated maximum, lowest id on ties
            let mut used = [false; 16];
            for n in &got {
                let mut best: Option<(usize, f64)> = None;
                for (i, row) in e.iter_rows().enumerate() {
                    if used[i] {
                        continue;
                    }
                    let s: f64 = row.iter().zip(&v).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
                    if best.is_none_or(|(_, bs)| s > bs) {
                        best = Some((i, s));
                    }
                }
                let (i, s) = best.unwrap();
                used[i] = true;
                assert_eq!(n.token_id as usize, i);
                assert!((f64::from(n.similarity) - s).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn neighborhood_membership() {
        let m = model(6);
        let e = &m.bundle().vocab.embedding;
        // a token's own row is its neighbor only if no other row out-scores it
        for w in 0..16u32 {
            let row = e.row(w as usize);
            let brute = (0..16).all(|u| u == w as usize || inner(row, e.row(u)) < inner(row, row));
            assert_eq!(in_neighborhood(&m, row, w).unwrap(), brute);
        }
        let mid: Vec<f32> = e.row(1).iter().zip(e.row(2)).map(|(a, b)| 0.5 * (a + b)).collect();
        let best = (0..16u32)
            .max_by(|&a, &b| {
                inner(&mid, e.row(a as usize))
                    .total_cmp(&inner(&mid, e.row(b as usize)))
                    .then(b.cmp(&a))
            })
            .unwrap();
        assert!(in_neighborhood(&m, &mid, best).unwrap());
        assert!(in_neighborhood(&m, &mid, 16).is_err());
    }

    #[test]
    fn greedy_walk_follows_its_own_target_path() {
        let m = model(7);
        let mem = m.encode_ids(&[1, 2, 3]).unwrap();
        let w = m.decode_walk(Some(&mem), &[], 6, Policy::Greedy).unwrap();
        assert!(target_path_check(&m, &w.walk, &w.tokens).unwrap().iter().all(|&b| b));
        let mut wrong = w.tokens.clone();
        wrong[2] = (wrong[2] + 1) % 16;
        let check = target_path_check(&m, &w.walk, &wrong).unwrap();
        assert!(!check[2]);
        assert!(target_path_check(&m, &w.walk, &wrong[..2]).is_err());
    }

    #[test]
    fn length_two_targets_match_exhaustive_enumeration() {
        let m = Model::new(random_bundle(&ModelConfig::gpt2_like(6, 4, 1, 1), 8)).unwrap();
        let w = m.decode_walk(None, &[2], 2, Policy::Greedy).unwrap();
        let mut hits = 0;
        for a in 0..6u32 {
            for b in 0..6u32 {
                let check = target_path_check(&m, &w.walk, &[a, b]).unwrap();
                let brute: Vec<bool> = w
                    .walk
                    .iter()
                    .zip([a, b])
                    .map(|(v, t)| crate::numkern::argmax(&m.logits(v)).unwrap() as u32 == t)
                    .collect();
                assert_eq!(check, brute);
                hits += usize::from(check.iter().all(|&x| x));
            }
        }
        assert_eq!(hits, 1);
    }

    #[test]
    fn csv_exports_have_expected_shape() {
        let m = model(9);
        let walk = trace_encoding_walk(&m, &[1, 2], 0, StackKind::Enc).unwrap();
        let mut buf = Vec::new();
        write_walk_csv(&mut buf, &walk).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "stack,layer,tag,position,dim0,dim1,dim2,dim3,dim4,dim5,dim6,dim7"
        );
        assert!(lines.next().unwrap().starts_with("enc,0,E,0,"));
        assert_eq!(text.lines().count(), walk.len() + 1);

        let nb = nearest_tokens(&m, &walk[0].vector, 3, Metric::Inner, Space::Input).unwrap();
        let mut buf = Vec::new();
        write_neighbors_csv(&mut buf, &m, &nb).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("token_id,token,similarity,rank\n"));
        assert!(text.lines().nth(1).unwrap().ends_with(",1"));
    }
}
