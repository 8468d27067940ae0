//! Randomized checks of the attention algebra: the standard path against the
//! per-head sum, merged value filters, and key/value permutation behaviour.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::io::AttentionWeights;
use crate::numkern::Matrix;
use crate::synth::{normal_matrix, normal_vec, rng};

use super::attention::{multi_head_attention_refactored, multi_head_attention_standard, AttentionHeadView, AttnParams};
use super::position::{relative_bias, BucketSpec};

/// One randomly drawn attention problem.
#[derive(Clone, Debug)]
pub struct RefactorCase {
    pub weights: AttentionWeights,
    pub n_heads: usize,
    pub x_q: Matrix,
    pub x_kv: Matrix,
    /// Per-head relative bias for `x_q` against `x_kv`.
    pub bias: Vec<Matrix>,
    pub params: AttnParams,
}

/// Draws a case. Unset sizes are random with `D <= 64`, `H in {1, 2, 4}`
/// and at most 16 positions.
pub fn random_case(rng: &mut impl Rng, d_model: Option<usize>, n_heads: Option<usize>) -> RefactorCase {
    let h = n_heads.unwrap_or_else(|| *[1, 2, 4].choose(rng).expect("non-empty"));
    let d = d_model.unwrap_or_else(|| h * rng.gen_range(1..=64 / h));
    let n = rng.gen_range(1..=16);
    let self_attention = rng.gen_bool(0.5);
    let m = if self_attention { n } else { rng.gen_range(1..=16) };
    let s = 1.0 / (d as f32).sqrt();
    let with_bias = rng.gen_bool(0.5);
    let bias_vec = |r: &mut _| with_bias.then(|| normal_vec(r, d, 0.3));
    let weights = AttentionWeights {
        wq: normal_matrix(rng, d, d, s),
        wk: normal_matrix(rng, d, d, s),
        wv: normal_matrix(rng, d, d, s),
        wo: normal_matrix(rng, d, d, s),
        bq: bias_vec(rng),
        bk: bias_vec(rng),
        bv: bias_vec(rng),
        bo: bias_vec(rng),
    };
    let x_q = normal_matrix(rng, n, d, 1.0);
    let x_kv = if self_attention {
        x_q.clone()
    } else {
        normal_matrix(rng, m, d, 1.0)
    };
    let causal = self_attention && rng.gen_bool(0.5);
    let spec = BucketSpec {
        num_buckets: 32,
        max_distance: 128,
        bidirectional: !causal,
    };
    let table = normal_matrix(rng, h, 32, 1.0);
    let scale = if rng.gen_bool(0.5) {
        1.0
    } else {
        1.0 / ((d / h) as f32).sqrt()
    };
    RefactorCase {
        weights,
        n_heads: h,
        x_q,
        x_kv,
        bias: relative_bias(&table, spec, n, m, 0),
        params: AttnParams::new(scale, causal),
    }
}

/// Largest deviations observed on one case.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CaseDeltas {
    /// `|standard - Σ_h O_h|`
    pub refactor: f32,
    /// `|(X W_v,h) W_o,h - X W_vo,h|` over heads
    pub merge: f32,
    /// Output change after permuting keys/values with zero bias, no mask.
    pub permutation: f32,
    /// Output change after the same permutation with the case's bias.
    pub biased_permutation: f32,
}

fn permute_rows(x: &Matrix, perm: &[usize]) -> Matrix {
    x.select_rows(perm)
}

pub fn check_case(case: &RefactorCase, perm_rng: &mut impl Rng) -> Result<CaseDeltas> {
    let w = &case.weights;
    let h = case.n_heads;
    let d_head = w.wq.cols() / h;
    let (std_out, _) =
        multi_head_attention_standard(w, h, &case.x_q, &case.x_kv, Some(&case.bias), case.params, false)?;
    let views = AttentionHeadView::all_heads(w, h, d_head)?;
    let (ref_out, _) = multi_head_attention_refactored(
        &views,
        w.bo.as_deref(),
        &case.x_q,
        &case.x_kv,
        Some(&case.bias),
        case.params,
        false,
    )?;
    let refactor = std_out.max_abs_diff(&ref_out);

    let mut merge = 0.0f32;
    for v in &views {
        let two_step = case.x_kv.matmul(&v.w_v)?.matmul(&v.w_o)?;
        merge = merge.max(two_step.max_abs_diff(&case.x_kv.matmul(&v.w_vo)?));
    }

    let mut perm: Vec<usize> = (0..case.x_kv.rows()).collect();
    perm.shuffle(perm_rng);
    let shuffled = permute_rows(&case.x_kv, &perm);
    let open = AttnParams {
        causal: false,
        ..case.params
    };
    let run = |kv: &Matrix, bias: Option<&[Matrix]>| {
        multi_head_attention_standard(w, h, &case.x_q, kv, bias, open, false).map(|r| r.0)
    };
    let permutation = run(&case.x_kv, None)?.max_abs_diff(&run(&shuffled, None)?);
    let biased_permutation = run(&case.x_kv, Some(&case.bias))?.max_abs_diff(&run(&shuffled, Some(&case.bias))?);
    Ok(CaseDeltas {
        refactor,
        merge,
        permutation,
        biased_permutation,
    })
}

/// Maxima over a batch of cases.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RefactorReport {
    pub cases: usize,
    pub max_refactor: f32,
    pub max_merge: f32,
    pub max_permutation: f32,
    pub max_biased_permutation: f32,
}

impl RefactorReport {
    pub fn passes(&self, tol: f32) -> bool {
        self.max_refactor <= tol && self.max_merge <= tol && self.max_permutation <= tol
    }
}

pub fn verify_refactor(
    d_model: Option<usize>,
    n_heads: Option<usize>,
    seed: u64,
    cases: usize,
) -> Result<RefactorReport> {
    let mut r = rng(seed);
    let mut report = RefactorReport {
        cases,
        ..RefactorReport::default()
    };
    for _ in 0..cases {
        let case = random_case(&mut r, d_model, n_heads);
        let d = check_case(&case, &mut r)?;
        report.max_refactor = report.max_refactor.max(d.refactor);
        report.max_merge = report.max_merge.max(d.merge);
        report.max_permutation = report.max_permutation.max(d.permutation);
        report.max_biased_permutation = report.max_biased_permutation.max(d.biased_permutation);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_report_is_within_tolerance() {
        let r = verify_refactor(None, None, 1, 30).unwrap();
        assert!(r.passes(1e-5), "{r:?}");
        assert!(r.max_biased_permutation > 1e-3, "{r:?}");
    }

    #[test]
    fn fixed_shape_cases() {
        for h in [1, 2, 4] {
            let r = verify_refactor(Some(16), Some(h), 9, 10).unwrap();
            assert!(r.passes(1e-5), "{r:?}");
        }
    }

    #[test]
    fn swapping_keys_with_equal_bias_columns_is_invisible() {
        let mut r = rng(4);
        let mut case = random_case(&mut r, Some(8), Some(2));
        case.params.causal = false;
        let m = case.x_kv.rows();
        if m < 2 {
            case.x_kv = normal_matrix(&mut r, 4, 8, 1.0);
        }
        let (n, m) = (case.x_q.rows(), case.x_kv.rows());
        // columns 0 and 1 share every bias value, so they form one class
        let bias: Vec<Matrix> = (0..2)
            .map(|_| {
                let mut b = normal_matrix(&mut r, n, m, 1.0);
                for i in 0..n {
                    b.set(i, 1, b.get(i, 0));
                }
                b
            })
            .collect();
        let mut perm: Vec<usize> = (0..m).collect();
        perm.swap(0, 1);
        let run = |kv: &Matrix| {
            multi_head_attention_standard(&case.weights, 2, &case.x_q, kv, Some(&bias), case.params, false)
                .unwrap()
                .0
        };
        let a = run(&case.x_kv);
        let b = run(&permute_rows(&case.x_kv, &perm));
        assert!(a.max_abs_diff(&b) <= 1e-6);
    }
}
