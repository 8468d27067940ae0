//! Seeded synthetic bundles and tasks.
//!
//! Everything here is a pure function of its arguments, so fixtures built in
//! tests, the acceptance suite and the CLI (`embwalk synth`) are identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::io::{
    Arch, AttentionWeights, FeedForwardWeights, LayerWeights, McInstance, ModelBundle, ModelConfig, ModelWeights,
    NormKind, NormWeights, PositionMode, Section, StackWeights, Vocabulary,
};
use crate::numkern::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut impl Rng, n: usize, std: f32) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f32) -> Matrix {
    Matrix::new(rows, cols, normal_vec(rng, rows * cols, std)).expect("shape")
}

pub fn token_names(v: usize) -> Vec<String> {
    (0..v).map(|i| format!("tok{i}")).collect()
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
    cfg: &'a ModelConfig,
    zero: bool,
}

impl Init<'_> {
    fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        if self.zero {
            Matrix::zeros(rows, cols)
        } else {
            normal_matrix(self.rng, rows, cols, 1.0 / (rows as f32).sqrt())
        }
    }

    fn small_vec(&mut self, n: usize) -> Vec<f32> {
        if self.zero {
            vec![0.0; n]
        } else {
            normal_vec(self.rng, n, 0.1)
        }
    }

    fn linear_bias(&mut self, n: usize) -> Option<Vec<f32>> {
        (self.cfg.norm == NormKind::Standard).then(|| self.small_vec(n))
    }

    fn norm(&mut self) -> NormWeights {
        let d = self.cfg.d_model;
        let scale = if self.zero {
            vec![0.0; d]
        } else {
            self.small_vec(d).into_iter().map(|x| 1.0 + x).collect()
        };
        let bias = (self.cfg.norm == NormKind::Standard).then(|| self.small_vec(d));
        NormWeights { scale, bias }
    }

    fn attention(&mut self) -> AttentionWeights {
        let d = self.cfg.d_model;
        AttentionWeights {
            wq: self.matrix(d, d),
            wk: self.matrix(d, d),
            wv: self.matrix(d, d),
            wo: self.matrix(d, d),
            bq: self.linear_bias(d),
            bk: self.linear_bias(d),
            bv: self.linear_bias(d),
            bo: self.linear_bias(d),
        }
    }

    fn stack(&mut self, n_layers: usize, cross: bool) -> StackWeights {
        let (d, ff) = (self.cfg.d_model, self.cfg.d_ff);
        let layers = (0..n_layers)
            .map(|_| {
                let norm_sa = self.norm();
                let self_attn = self.attention();
                let (norm_xa, cross_attn) = if cross {
                    (Some(self.norm()), Some(self.attention()))
                } else {
                    (None, None)
                };
                LayerWeights {
                    norm_sa,
                    self_attn,
                    norm_xa,
                    cross_attn,
                    norm_ff: self.norm(),
                    ff: FeedForwardWeights {
                        w_in: self.matrix(d, ff),
                        w_out: self.matrix(ff, d),
                        b_in: self.linear_bias(ff),
                        b_out: self.linear_bias(d),
                    },
                }
            })
            .collect();
        let rel_bias = (self.cfg.position_mode == PositionMode::RelativeBucketBias && n_layers > 0).then(|| {
            if self.zero {
                Matrix::zeros(self.cfg.n_heads, self.cfg.rel_buckets)
            } else {
                normal_matrix(self.rng, self.cfg.n_heads, self.cfg.rel_buckets, 1.0)
            }
        });
        StackWeights {
            layers,
            rel_bias,
            final_norm: self.norm(),
        }
    }
}

fn build(cfg: &ModelConfig, seed: u64, zero: bool) -> ModelBundle {
    cfg.validate().expect("synthetic config must be valid");
    let mut rng = rng(seed);
    let (v, d) = (cfg.vocab_size, cfg.d_model);
    let embedding = if zero {
        Matrix::zeros(v, d)
    } else {
        normal_matrix(&mut rng, v, d, 1.0)
    };
    let mut init = Init {
        rng: &mut rng,
        cfg,
        zero,
    };
    let pos_embedding = (cfg.position_mode == PositionMode::LearnedAbsolute).then(|| {
        if zero {
            Matrix::zeros(cfg.max_positions, d)
        } else {
            normal_matrix(init.rng, cfg.max_positions, d, 0.3)
        }
    });
    let lm_head = (!cfg.tied_embeddings).then(|| init.matrix(v, d));
    let encoder = (cfg.arch == Arch::EncoderDecoder).then(|| init.stack(cfg.n_layers_enc, false));
    let decoder = init.stack(cfg.n_layers_dec, cfg.arch == Arch::EncoderDecoder);
    ModelBundle {
        config: cfg.clone(),
        weights: ModelWeights {
            pos_embedding,
            lm_head,
            encoder,
            decoder,
        },
        vocab: Vocabulary {
            tokens: token_names(v),
            embedding,
        },
    }
}

/// Gaussian weights scaled by `1/sqrt(fan_in)`, unit-variance embeddings,
/// norm scales near one. Linear biases are present for standard-norm
/// (GPT-2 style) configs.
pub fn random_bundle(cfg: &ModelConfig, seed: u64) -> ModelBundle {
    build(cfg, seed, false)
}

/// Every tensor zero, including the embedding.
pub fn zero_bundle(cfg: &ModelConfig) -> ModelBundle {
    build(cfg, 0, true)
}

/// Random embeddings (and positions) with every layer weight and layer
/// norm scale zero: each sublayer adds exactly nothing to the residual
/// stream. Final norms are left at unit scale.
pub fn residual_identity_bundle(cfg: &ModelConfig, seed: u64) -> ModelBundle {
    let mut b = build(cfg, seed, true);
    let random = build(cfg, seed, false);
    b.vocab.embedding = random.vocab.embedding;
    b.weights.pos_embedding = random.weights.pos_embedding;
    b.weights.lm_head = random.weights.lm_head;
    for s in [b.weights.encoder.as_mut(), Some(&mut b.weights.decoder)]
        .into_iter()
        .flatten()
    {
        s.final_norm.scale = vec![1.0; cfg.d_model];
    }
    b
}

/// A zero-layer decoder-only model whose token vectors are scaled one-hot
/// rows: the next-token distribution peaks on the current token, so it
/// "copies" its input.
pub fn copy_bundle(vocab_size: usize) -> ModelBundle {
    let mut cfg = ModelConfig::gpt2_like(vocab_size, vocab_size, 1, 0);
    cfg.position_mode = PositionMode::RelativeBucketBias;
    cfg.rel_buckets = 32;
    cfg.rel_max_distance = 128;
    cfg.norm = NormKind::Rms;
    cfg.max_positions = 0;
    let mut b = build(&cfg, 0, true);
    b.vocab.embedding = Matrix::identity(vocab_size);
    b.vocab.embedding.scale(4.0);
    b.weights.decoder.final_norm.scale = vec![1.0; vocab_size];
    b
}

/// Shape parameters for [`random_task`].
#[derive(Clone, Copy, Debug)]
pub struct TaskShape {
    pub n_instances: usize,
    pub k_shot: usize,
    pub n_choices: usize,
    pub max_sentence_len: usize,
    pub max_sentences: usize,
    pub max_choice_len: usize,
}

impl Default for TaskShape {
    fn default() -> Self {
        Self {
            n_instances: 20,
            k_shot: 2,
            n_choices: 4,
            max_sentence_len: 4,
            max_sentences: 2,
            max_choice_len: 3,
        }
    }
}

fn random_section(rng: &mut ChaCha8Rng, role: &str, vocab: usize, shape: &TaskShape) -> Section {
    let n_sent = rng.gen_range(1..=shape.max_sentences);
    Section {
        role: role.to_owned(),
        sentences: (0..n_sent)
            .map(|_| {
                let len = rng.gen_range(1..=shape.max_sentence_len);
                (0..len).map(|_| rng.gen_range(1..vocab as u32)).collect()
            })
            .collect(),
        text: None,
    }
}

/// Hellaswag-shaped instances: `k_shot` examples of context + completion
/// sections, a query context, and random choices.
pub fn random_task(vocab_size: usize, shape: TaskShape, seed: u64) -> Vec<McInstance> {
    let mut rng = rng(seed);
    (0..shape.n_instances)
        .map(|i| {
            let examples = (0..shape.k_shot)
                .map(|_| {
                    vec![
                        random_section(&mut rng, "context", vocab_size, &shape),
                        random_section(&mut rng, "completion", vocab_size, &shape),
                    ]
                })
                .collect();
            let query = vec![random_section(&mut rng, "context", vocab_size, &shape)];
            let choices = (0..shape.n_choices)
                .map(|_| {
                    let len = rng.gen_range(1..=shape.max_choice_len);
                    (0..len).map(|_| rng.gen_range(1..vocab_size as u32)).collect()
                })
                .collect();
            McInstance {
                id: format!("synth-{i}"),
                examples,
                query,
                choices,
                gold: rng.gen_range(0..shape.n_choices),
            }
        })
        .collect()
}

/// Instances whose gold choice repeats the last context token twice while
/// every distractor avoids that token; pairs with [`copy_bundle`].
pub fn copy_task(vocab_size: usize, n: usize, seed: u64) -> Vec<McInstance> {
    let shape = TaskShape {
        n_instances: n,
        k_shot: 0,
        ..TaskShape::default()
    };
    let mut rng = rng(seed);
    random_task(vocab_size, shape, seed ^ 0x5eed)
        .into_iter()
        .map(|mut inst| {
            let last = *inst.context_ids().last().expect("query is non-empty");
            let gold = rng.gen_range(0..inst.choices.len());
            for (i, c) in inst.choices.iter_mut().enumerate() {
                if i == gold {
                    *c = vec![last, last];
                } else {
                    *c = (0..2)
                        .map(|_| loop {
                            let t = rng.gen_range(1..vocab_size as u32);
                            if t != last {
                                break t;
                            }
                        })
                        .collect();
                }
            }
            inst.gold = gold;
            inst
        })
        .collect()
}
