//! Bucketed relative position bias.
//!
//! Offsets are `key - query`. Bidirectional stacks use half the buckets for
//! each sign; causal stacks only see non-positive offsets. Within a side the
//! first half of the buckets are exact offsets and the rest are log-spaced up
//! to `max_distance`, after which everything shares the last bucket.

use crate::numkern::Matrix;

pub fn relative_position_bucket(offset: i64, bidirectional: bool, num_buckets: usize, max_distance: usize) -> usize {
    let mut buckets = num_buckets as i64;
    let mut base = 0i64;
    let distance = if bidirectional {
        buckets /= 2;
        if offset > 0 {
            base += buckets;
        }
        offset.abs()
    } else {
        (-offset).max(0)
    };
    let max_exact = buckets / 2;
    let bucket = if distance < max_exact {
        distance
    } else {
        // f32 log ratio, truncated toward zero, as in the reference T5 code
        let ratio = (distance as f32 / max_exact as f32).ln() / ((max_distance as f64 / max_exact as f64).ln() as f32)
            * (buckets - max_exact) as f32;
        (max_exact + ratio as i64).min(buckets - 1)
    };
    (base + bucket) as usize
}

/// Bucket geometry of one stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BucketSpec {
    pub num_buckets: usize,
    pub max_distance: usize,
    pub bidirectional: bool,
}

impl BucketSpec {
    pub fn bucket(&self, offset: i64) -> usize {
        relative_position_bucket(offset, self.bidirectional, self.num_buckets, self.max_distance)
    }
}

/// Per-head `n x m` bias matrices, `B_h[i][j] = rel_bias[h][bucket(j - (i + q_offset))]`.
///
/// `q_offset` is the absolute position of the first query row, used when the
/// queries are a suffix of the key sequence (incremental decoding).
pub fn relative_bias(rel_bias: &Matrix, spec: BucketSpec, n: usize, m: usize, q_offset: usize) -> Vec<Matrix> {
    let buckets: Vec<usize> = (0..n)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| spec.bucket(j as i64 - (i + q_offset) as i64))
        .collect();
    (0..rel_bias.rows())
        .map(|h| {
            let table = rel_bias.row(h);
            let data = buckets.iter().map(|&b| table[b]).collect();
            Matrix::new(n, m, data).expect("bias shape")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent bucket map for the 32/128 geometry, from integer
    /// thresholds of `8 + floor(2 * log2(d / 8))`.
    fn bucket_oracle_32_128(offset: i64, bidirectional: bool) -> usize {
        let (half, base, d) = if bidirectional {
            (16usize, if offset > 0 { 16 } else { 0 }, offset.unsigned_abs() as usize)
        } else {
            (32usize, 0, (-offset).max(0) as usize)
        };
        let exact = half / 2;
        let log_buckets = half - exact;
        if d < exact {
            return base + d;
        }
        // smallest distance reaching each log bucket: exact * (128/exact)^(k/log_buckets)
        let mut b = exact;
        for k in 1..log_buckets {
            let threshold =
                (exact as f64 * (128.0 / exact as f64).powf(k as f64 / log_buckets as f64) - 1e-9).ceil() as usize;
            if d >= threshold {
                b = exact + k;
            }
        }
        base + b
    }

    #[test]
    fn bidirectional_reference_table() {
        // distance -> bucket for the key-before-query side
        let table = [
            (0, 0),
            (7, 7),
            (8, 8),
            (11, 8),
            (12, 9),
            (15, 9),
            (16, 10),
            (22, 10),
            (23, 11),
            (31, 11),
            (32, 12),
            (45, 12),
            (46, 13),
            (63, 13),
            (64, 14),
            (90, 14),
            (91, 15),
            (128, 15),
            (1000, 15),
        ];
        for (d, b) in table {
            assert_eq!(relative_position_bucket(-d, true, 32, 128), b, "distance {d}");
            if d > 0 {
                assert_eq!(relative_position_bucket(d, true, 32, 128), b + 16, "distance +{d}");
            }
        }
    }

    #[test]
    fn matches_oracle_over_offset_range() {
        for offset in -300i64..=300 {
            assert_eq!(
                relative_position_bucket(offset, true, 32, 128),
                bucket_oracle_32_128(offset, true),
                "bidirectional offset {offset}"
            );
            assert_eq!(
                relative_position_bucket(offset, false, 32, 128),
                bucket_oracle_32_128(offset, false),
                "causal offset {offset}"
            );
        }
    }

    #[test]
    fn causal_buckets_ignore_future_offsets() {
        for k in 1..50 {
            assert_eq!(relative_position_bucket(k, false, 32, 128), 0);
        }
    }

    #[test]
    fn bias_diagonal_is_constant_and_classes_share_values() {
        let rel = Matrix::new(1, 32, (0..32).map(|x| x as f32).collect()).unwrap();
        let spec = BucketSpec {
            num_buckets: 32,
            max_distance: 128,
            bidirectional: true,
        };
        let b = &relative_bias(&rel, spec, 40, 40, 0)[0];
        for i in 0..40 {
            assert_eq!(b.get(i, i), b.get(0, 0));
        }
        // offsets -12 and -15 share bucket 9
        assert_eq!(b.get(20, 8), b.get(20, 5));
        assert_eq!(b.get(20, 8), 9.0);
    }

    #[test]
    fn query_offset_selects_suffix_rows() {
        let rel = Matrix::new(2, 32, (0..64).map(|x| x as f32 * 0.5).collect()).unwrap();
        let spec = BucketSpec {
            num_buckets: 32,
            max_distance: 128,
            bidirectional: false,
        };
        let full = relative_bias(&rel, spec, 6, 6, 0);
        let last = relative_bias(&rel, spec, 1, 6, 5);
        for h in 0..2 {
            assert_eq!(last[h].row(0), full[h].row(5));
        }
    }
}
