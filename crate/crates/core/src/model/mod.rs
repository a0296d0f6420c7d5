//! Attention-block recommender: parameter layout, initialization and the
//! forward pass for every attention variant.

mod checkpoint;
mod forward;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Masking, Matrix, NumericsError};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, CHECKPOINT_BIN, CHECKPOINT_JSON};
pub use forward::{block_attention, feed_forward, forward, shared_attention, ForwardTrace};

/// Standard deviation of every random initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("item index {index} out of range for {num_items} items")]
    ItemIndex { index: usize, num_items: usize },
    #[error("batch has no valid target position")]
    NoValidPositions,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedPattern {
    Average,
    Linear,
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionSpec {
    /// Learned `n x n` attention logits per block.
    Positional,
    /// Learned logits `R1 · R2ᵀ` with `R1, R2` of shape `n x k`.
    Factorized { k: usize },
    /// Query/key attention over content plus a shared position embedding.
    DotProduct { num_heads: usize },
    /// Non-learned causal weights.
    Fixed { pattern: FixedPattern },
}

impl AttentionSpec {
    pub fn label(&self) -> String {
        match self {
            Self::Positional => "positional".into(),
            Self::Factorized { k } => format!("factorized(k={k})"),
            Self::DotProduct { num_heads } => format!("dot_product(h={num_heads})"),
            Self::Fixed { pattern } => format!("fixed({pattern:?})").to_lowercase(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Hidden size.
    pub d: usize,
    /// Maximum sequence length.
    pub n: usize,
    pub num_blocks: usize,
    /// Number of real items; the embedding table has one extra padding row.
    pub num_items: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub attention: AttentionSpec,
    pub dims: Dims,
    pub dropout: f64,
    #[serde(default)]
    pub masking: Masking,
}

impl ModelSpec {
    /// Every configuration problem, empty when the model is buildable.
    pub fn problems(&self) -> Vec<String> {
        let Dims {
            d,
            n,
            num_blocks,
            num_items,
        } = self.dims;
        let mut out = Vec::new();
        if d == 0 {
            out.push("hidden size d must be positive".into());
        }
        if n < 2 {
            out.push(format!("maximum sequence length must be at least 2, got {n}"));
        }
        if num_blocks == 0 {
            out.push("number of blocks must be positive".into());
        }
        if num_items == 0 {
            out.push("number of items must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            out.push(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        match self.attention {
            AttentionSpec::Factorized { k } if k == 0 || k > n => {
                out.push(format!("factorization rank k must lie in 1..={n}, got {k}"))
            }
            AttentionSpec::DotProduct { num_heads } if num_heads == 0 || d % num_heads != 0 => {
                out.push(format!("num_heads {num_heads} must divide d = {d}"))
            }
            _ => {}
        }
        out
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionParams<T> {
    Positional { r: T },
    Factorized { r1: T, r2: T },
    DotProduct { w_q: T, w_k: T },
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub attn_norm: Norm<T>,
    pub attention: AttentionParams<T>,
    pub w_v: T,
    pub ffn_norm: Norm<T>,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// Parameter tree, generic over the leaf type so values, gradients and tape
/// handles share one layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    /// `(num_items + 1) x d`; row 0 is padding and stays zero.
    pub item_embedding: T,
    /// `n x d`, dot-product variant only.
    pub position_embedding: Option<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Norm<T>,
}

pub type ModelParams = Params<Matrix>;
pub type GradientSet = Params<Matrix>;

pub const ITEM_EMBEDDING: &str = "item_embedding";

impl<T> Params<T> {
    /// Leaves in canonical order with dotted names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![(ITEM_EMBEDDING.to_string(), &self.item_embedding)];
        if let Some(p) = &self.position_embedding {
            out.push(("position_embedding".into(), p));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            let name = |s: &str| format!("blocks.{l}.{s}");
            out.push((name("attn_norm.gamma"), &b.attn_norm.gamma));
            out.push((name("attn_norm.beta"), &b.attn_norm.beta));
            match &b.attention {
                AttentionParams::Positional { r } => out.push((name("attention.r"), r)),
                AttentionParams::Factorized { r1, r2 } => {
                    out.push((name("attention.r1"), r1));
                    out.push((name("attention.r2"), r2));
                }
                AttentionParams::DotProduct { w_q, w_k } => {
                    out.push((name("attention.w_q"), w_q));
                    out.push((name("attention.w_k"), w_k));
                }
                AttentionParams::Fixed => {}
            }
            out.push((name("w_v"), &b.w_v));
            out.push((name("ffn_norm.gamma"), &b.ffn_norm.gamma));
            out.push((name("ffn_norm.beta"), &b.ffn_norm.beta));
            out.push((name("w1"), &b.w1));
            out.push((name("b1"), &b.b1));
            out.push((name("w2"), &b.w2));
            out.push((name("b2"), &b.b2));
        }
        out.push(("final_norm.gamma".into(), &self.final_norm.gamma));
        out.push(("final_norm.beta".into(), &self.final_norm.beta));
        out
    }

    /// Same order as [`Params::named`].
    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.item_embedding];
        if let Some(p) = &mut self.position_embedding {
            out.push(p);
        }
        for b in &mut self.blocks {
            out.push(&mut b.attn_norm.gamma);
            out.push(&mut b.attn_norm.beta);
            match &mut b.attention {
                AttentionParams::Positional { r } => out.push(r),
                AttentionParams::Factorized { r1, r2 } => {
                    out.push(r1);
                    out.push(r2);
                }
                AttentionParams::DotProduct { w_q, w_k } => {
                    out.push(w_q);
                    out.push(w_k);
                }
                AttentionParams::Fixed => {}
            }
            out.push(&mut b.w_v);
            out.push(&mut b.ffn_norm.gamma);
            out.push(&mut b.ffn_norm.beta);
            out.push(&mut b.w1);
            out.push(&mut b.b1);
            out.push(&mut b.w2);
            out.push(&mut b.b2);
        }
        out.push(&mut self.final_norm.gamma);
        out.push(&mut self.final_norm.beta);
        out
    }

    pub fn leaves(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Structure-preserving map over leaves, in canonical order.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Params<U> {
        let norm = |n: &Norm<T>, f: &mut dyn FnMut(&T) -> U| Norm {
            gamma: f(&n.gamma),
            beta: f(&n.beta),
        };
        let item_embedding = f(&self.item_embedding);
        let position_embedding = self.position_embedding.as_ref().map(&mut f);
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let attn_norm = norm(&b.attn_norm, &mut f);
                let attention = match &b.attention {
                    AttentionParams::Positional { r } => AttentionParams::Positional { r: f(r) },
                    AttentionParams::Factorized { r1, r2 } => {
                        let r1 = f(r1);
                        AttentionParams::Factorized { r1, r2: f(r2) }
                    }
                    AttentionParams::DotProduct { w_q, w_k } => {
                        let w_q = f(w_q);
                        AttentionParams::DotProduct { w_q, w_k: f(w_k) }
                    }
                    AttentionParams::Fixed => AttentionParams::Fixed,
                };
                let w_v = f(&b.w_v);
                let ffn_norm = norm(&b.ffn_norm, &mut f);
                Block {
                    attn_norm,
                    attention,
                    w_v,
                    ffn_norm,
                    w1: f(&b.w1),
                    b1: f(&b.b1),
                    w2: f(&b.w2),
                    b2: f(&b.b2),
                }
            })
            .collect();
        let final_norm = norm(&self.final_norm, &mut f);
        Params {
            item_embedding,
            position_embedding,
            blocks,
            final_norm,
        }
    }
}

impl ModelParams {
    pub fn zeros_like(&self) -> GradientSet {
        self.map(|m| Matrix::zeros(m.rows(), m.cols()))
    }

    pub fn num_scalars(&self) -> usize {
        self.leaves().iter().map(|m| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.leaves().iter().all(|m| m.is_finite())
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let data = (0..rows * cols)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
        .expect("shape")
}

fn unit_norm(d: usize) -> Norm<Matrix> {
    Norm {
        gamma: Matrix::filled(1, d, 1.0),
        beta: Matrix::zeros(1, d),
    }
}

pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams, ModelError> {
    spec.validate()?;
    let Dims {
        d,
        n,
        num_blocks,
        num_items,
    } = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut item_embedding = truncated_normal(&mut rng, num_items + 1, d);
    item_embedding.row_mut(0).fill(0.0);
    let position_embedding = matches!(spec.attention, AttentionSpec::DotProduct { .. })
        .then(|| normal(&mut rng, n, d));
    let blocks = (0..num_blocks)
        .map(|_| {
            let attention = match spec.attention {
                AttentionSpec::Positional => AttentionParams::Positional {
                    r: Matrix::zeros(n, n),
                },
                AttentionSpec::Factorized { k } => AttentionParams::Factorized {
                    r1: normal(&mut rng, n, k),
                    r2: normal(&mut rng, n, k),
                },
                AttentionSpec::DotProduct { .. } => AttentionParams::DotProduct {
                    w_q: truncated_normal(&mut rng, d, d),
                    w_k: truncated_normal(&mut rng, d, d),
                },
                AttentionSpec::Fixed { .. } => AttentionParams::Fixed,
            };
            Block {
                attn_norm: unit_norm(d),
                attention,
                w_v: truncated_normal(&mut rng, d, d),
                ffn_norm: unit_norm(d),
                w1: truncated_normal(&mut rng, d, d),
                b1: Matrix::zeros(1, d),
                w2: truncated_normal(&mut rng, d, d),
                b2: Matrix::zeros(1, d),
            }
        })
        .collect();
    Ok(Params {
        item_embedding,
        position_embedding,
        blocks,
        final_norm: unit_norm(d),
    })
}

/// Row-normalized causal weights of a fixed pattern.
pub fn fixed_pattern_matrix(pattern: FixedPattern, n: usize) -> Matrix {
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let row = out.row_mut(i);
        for (j, w) in row.iter_mut().enumerate().take(i + 1) {
            *w = match pattern {
                FixedPattern::Average => 1.0,
                FixedPattern::Linear => (j + 1) as f64,
                FixedPattern::Exponential => (j as f64 - i as f64).exp(),
            };
        }
        let total: f64 = row.iter().sum();
        for w in row.iter_mut() {
            *w /= total;
        }
    }
    out
}

/// Parameters of one attention layer: value projection plus attention-specific weights.
pub fn parameter_count(attention: &AttentionSpec, dims: &Dims) -> usize {
    let Dims { d, n, .. } = *dims;
    d * d
        + match *attention {
            AttentionSpec::Positional => n * n,
            AttentionSpec::Factorized { k } => 2 * k * n,
            AttentionSpec::DotProduct { .. } => 2 * d * d,
            AttentionSpec::Fixed { .. } => 0,
        }
}

/// Seed for the `site`-th dropout mask of a forward pass.
pub(crate) fn site_seed(seed: u64, site: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(site);
    rng.random()
}
