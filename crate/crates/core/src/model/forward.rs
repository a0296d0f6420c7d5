use super::{
    fixed_pattern_matrix, site_seed, AttentionParams, AttentionSpec, Block, GradientSet,
    ModelError, ModelParams, ModelSpec, Norm, Params,
};
use crate::dataset::{SequenceBatch, PAD};
use crate::numerics::{Matrix, Tape, Var};

/// Recorded forward pass. Holds the tape so gradients can be taken once.
pub struct ForwardTrace {
    tape: Tape,
    vars: Params<Var>,
    /// `F_0 .. F_L`, each `(B·n) x d`.
    block_outputs: Vec<Var>,
    /// Per block: `n x n` shared weights, or `(B·h·n) x n` for dot-product.
    attention: Vec<Var>,
    normalized: Var,
    loss: Option<Var>,
    batch_size: usize,
    seq_len: usize,
}

/// Runs the model on `batch`. Dropout is active only when `training` is set;
/// its masks are derived from `seed`.
pub fn forward(
    params: &ModelParams,
    spec: &ModelSpec,
    batch: &SequenceBatch,
    training: bool,
    seed: u64,
) -> Result<ForwardTrace, ModelError> {
    let dims = spec.dims;
    let n = dims.n;
    if batch.seq_len != n {
        return Err(ModelError::Config(format!(
            "batch sequence length {} differs from model length {n}",
            batch.seq_len
        )));
    }
    let vocab = params.item_embedding.rows();
    if let Some(&index) = batch
        .inputs
        .iter()
        .chain(&batch.targets)
        .find(|&&i| i >= vocab)
    {
        return Err(ModelError::ItemIndex {
            index,
            num_items: vocab - 1,
        });
    }
    let bsz = batch.batch_size();
    let mut tape = Tape::new();
    let vars = params.map(|m| tape.param(m.clone()));
    let nonpad: Vec<bool> = batch.inputs.iter().map(|&i| i != PAD).collect();
    let mut site = 0u64;
    let mut dropout_at = |tape: &mut Tape, x: Var| {
        site += 1;
        tape.dropout(x, spec.dropout, site_seed(seed, site), training)
    };

    let mut x = tape.gather(vars.item_embedding, batch.inputs.clone())?;
    if let Some(p) = vars.position_embedding {
        x = tape.add_tiled(x, p)?;
    }
    x = tape.mask_rows(x, nonpad.clone())?;
    let mut block_outputs = vec![x];
    let mut attention = Vec::with_capacity(vars.blocks.len());

    for block in &vars.blocks {
        let (weights, mixed) = attention_branch(&mut tape, block, spec, x)?;
        attention.push(weights);
        let mixed = dropout_at(&mut tape, mixed)?;
        let x_tilde = tape.add(x, mixed)?;

        let f = ffn_branch(&mut tape, block, x_tilde)?;
        let f = dropout_at(&mut tape, f)?;
        let out = tape.add(x_tilde, f)?;
        x = tape.mask_rows(out, nonpad.clone())?;
        block_outputs.push(x);
    }

    let normalized = tape.layer_norm(x, vars.final_norm.gamma, vars.final_norm.beta)?;
    let valid: Vec<usize> = (0..bsz * n).filter(|&i| batch.valid_mask[i]).collect();
    let loss = if valid.is_empty() {
        None
    } else {
        let targets = valid.iter().map(|&i| batch.targets[i]).collect();
        let rows = tape.gather(normalized, valid)?;
        Some(tape.tied_cross_entropy(rows, vars.item_embedding, targets)?)
    };
    Ok(ForwardTrace {
        tape,
        vars,
        block_outputs,
        attention,
        normalized,
        loss,
        batch_size: bsz,
        seq_len: n,
    })
}

/// `attention(LayerNorm(x)) · W_V` for one block; returns the weights and the
/// mixed values (no residual).
fn attention_branch(
    tape: &mut Tape,
    block: &Block<Var>,
    spec: &ModelSpec,
    x: Var,
) -> Result<(Var, Var), ModelError> {
    let (d, n) = (spec.dims.d, spec.dims.n);
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let h = tape.layer_norm(x, block.attn_norm.gamma, block.attn_norm.beta)?;
    let v = tape.matmul(h, block.w_v)?;
    Ok(match (&block.attention, spec.attention) {
        (AttentionParams::Positional { r }, AttentionSpec::Positional) => {
            let logits = tape.scale(*r, inv_sqrt_d);
            let a = tape.softmax(logits, spec.masking)?;
            (a, tape.attn_apply(a, v, 1, true)?)
        }
        (AttentionParams::Factorized { r1, r2 }, AttentionSpec::Factorized { .. }) => {
            let r = tape.matmul_nt(*r1, *r2)?;
            let logits = tape.scale(r, inv_sqrt_d);
            let a = tape.softmax(logits, spec.masking)?;
            (a, tape.attn_apply(a, v, 1, true)?)
        }
        (AttentionParams::DotProduct { w_q, w_k }, AttentionSpec::DotProduct { num_heads }) => {
            let q = tape.matmul(h, *w_q)?;
            let k = tape.matmul(h, *w_k)?;
            let scale = 1.0 / ((d / num_heads) as f64).sqrt();
            let scores = tape.attn_scores(q, k, n, num_heads, scale)?;
            let a = tape.softmax(scores, spec.masking)?;
            (a, tape.attn_apply(a, v, num_heads, false)?)
        }
        (AttentionParams::Fixed, AttentionSpec::Fixed { pattern }) => {
            let a = tape.constant(fixed_pattern_matrix(pattern, n));
            (a, tape.attn_apply(a, v, 1, true)?)
        }
        _ => {
            return Err(ModelError::Config(
                "parameters do not match the attention variant".into(),
            ))
        }
    })
}

/// `ReLU(LayerNorm(x) W1 + b1) W2 + b2`, position-wise.
fn ffn_branch(tape: &mut Tape, block: &Block<Var>, x: Var) -> Result<Var, ModelError> {
    let h = tape.layer_norm(x, block.ffn_norm.gamma, block.ffn_norm.beta)?;
    let f = tape.matmul(h, block.w1)?;
    let f = tape.add_row(f, block.b1)?;
    let f = tape.relu(f);
    let f = tape.matmul(f, block.w2)?;
    Ok(tape.add_row(f, block.b2)?)
}

fn block_on_tape(tape: &mut Tape, block: &Block<Matrix>) -> Block<Var> {
    let mut c = |m: &Matrix| tape.constant(m.clone());
    let attention = match &block.attention {
        AttentionParams::Positional { r } => AttentionParams::Positional { r: c(r) },
        AttentionParams::Factorized { r1, r2 } => {
            let r1 = c(r1);
            AttentionParams::Factorized { r1, r2: c(r2) }
        }
        AttentionParams::DotProduct { w_q, w_k } => {
            let w_q = c(w_q);
            AttentionParams::DotProduct { w_q, w_k: c(w_k) }
        }
        AttentionParams::Fixed => AttentionParams::Fixed,
    };
    Block {
        attn_norm: Norm {
            gamma: c(&block.attn_norm.gamma),
            beta: c(&block.attn_norm.beta),
        },
        attention,
        w_v: c(&block.w_v),
        ffn_norm: Norm {
            gamma: c(&block.ffn_norm.gamma),
            beta: c(&block.ffn_norm.beta),
        },
        w1: c(&block.w1),
        b1: c(&block.b1),
        w2: c(&block.w2),
        b2: c(&block.b2),
    }
}

/// Attention branch of one block applied to `(B·n) x d` inputs, without the
/// residual. Returns `(weights, output)`.
pub fn block_attention(
    block: &Block<Matrix>,
    spec: &ModelSpec,
    x: &Matrix,
) -> Result<(Matrix, Matrix), ModelError> {
    let mut tape = Tape::new();
    let vars = block_on_tape(&mut tape, block);
    let x = tape.constant(x.clone());
    let (a, out) = attention_branch(&mut tape, &vars, spec, x)?;
    Ok((tape.value(a).clone(), tape.value(out).clone()))
}

/// Feed-forward branch of one block, without the residual.
pub fn feed_forward(block: &Block<Matrix>, x: &Matrix) -> Result<Matrix, ModelError> {
    let mut tape = Tape::new();
    let vars = block_on_tape(&mut tape, block);
    let x = tape.constant(x.clone());
    let out = ffn_branch(&mut tape, &vars, x)?;
    Ok(tape.value(out).clone())
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Mean cross-entropy over valid target positions.
    pub fn loss(&self) -> Result<f64, ModelError> {
        self.loss
            .map(|l| self.tape.value(l).get(0, 0))
            .ok_or(ModelError::NoValidPositions)
    }

    /// Block output `F_l` (`l = 0` is the embedded input), `(B·n) x d`.
    pub fn block_output(&self, l: usize) -> &Matrix {
        self.tape.value(self.block_outputs[l])
    }

    pub fn num_blocks(&self) -> usize {
        self.attention.len()
    }

    /// Attention weights of block `l`. Input-independent variants give one
    /// `n x n` matrix; dot-product gives `B·h` stacked `n x n` blocks.
    pub fn attention(&self, l: usize) -> &Matrix {
        self.tape.value(self.attention[l])
    }

    /// Final normalized hidden states, `(B·n) x d`.
    pub fn hidden(&self) -> &Matrix {
        self.tape.value(self.normalized)
    }

    /// Scores for every position, `(B·n) x (num_items + 1)`.
    pub fn logits(&self) -> Matrix {
        self.hidden()
            .matmul_nt(self.tape.value(self.vars.item_embedding))
            .expect("hidden and embedding widths agree")
    }

    /// Scores at the last position of each sequence, `B x (num_items + 1)`.
    pub fn last_logits(&self) -> Matrix {
        let h = self.hidden();
        let rows: Vec<Vec<f64>> = (0..self.batch_size)
            .map(|b| h.row((b + 1) * self.seq_len - 1).to_vec())
            .collect();
        Matrix::from_rows(&rows)
            .expect("rows")
            .matmul_nt(self.tape.value(self.vars.item_embedding))
            .expect("hidden and embedding widths agree")
    }

    /// Gradients of the loss for every parameter; the padding row of the
    /// item embedding always receives zero.
    pub fn backward(mut self) -> Result<GradientSet, ModelError> {
        let loss = self.loss.ok_or(ModelError::NoValidPositions)?;
        let mut grads = self.tape.backward(loss)?;
        let tape = &self.tape;
        let mut out = self.vars.map(|&v| {
            grads.take(v).unwrap_or_else(|| {
                let m = tape.value(v);
                Matrix::zeros(m.rows(), m.cols())
            })
        });
        out.item_embedding.row_mut(0).fill(0.0);
        Ok(out)
    }
}

/// Attention weights that `forward` would use for an input-independent block,
/// computed without recording a tape.
pub fn shared_attention(
    params: &ModelParams,
    spec: &ModelSpec,
    block: usize,
) -> Result<Option<Matrix>, ModelError> {
    let n = spec.dims.n;
    let scale = 1.0 / (spec.dims.d as f64).sqrt();
    let logits = match (&params.blocks[block].attention, spec.attention) {
        (AttentionParams::Positional { r }, _) => r.scale(scale),
        (AttentionParams::Factorized { r1, r2 }, _) => r1.matmul_nt(r2)?.scale(scale),
        (AttentionParams::Fixed, AttentionSpec::Fixed { pattern }) => {
            return Ok(Some(fixed_pattern_matrix(pattern, n)))
        }
        _ => return Ok(None),
    };
    Ok(Some(crate::numerics::masked_softmax_rows(&logits, spec.masking)?))
}
