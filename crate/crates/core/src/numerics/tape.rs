use super::{
    dropout_scales, gemm, layer_norm_forward, matrix::matmul_t, softmax_forward, LayerNormCache,
    Masking, Matrix, NumericsError, View, ViewMut,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    AddTiled {
        x: Var,
        tile: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Relu(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache,
    },
    Softmax {
        x: Var,
        masking: Masking,
        full: Option<Matrix>,
    },
    Dropout {
        x: Var,
        scales: Vec<f64>,
    },
    MaskRows {
        x: Var,
        keep: Vec<bool>,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    AttnScores {
        q: Var,
        k: Var,
        heads: usize,
        seq: usize,
        scale: f64,
    },
    AttnApply {
        attn: Var,
        values: Var,
        heads: usize,
        shared: bool,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    TiedCrossEntropy {
        hidden: Var,
        table: Var,
        targets: Vec<usize>,
        log_z: Vec<f64>,
    },
}

/// Rows of hidden states scored per chunk by the tied cross-entropy.
const CE_CHUNK: usize = 256;

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed primitives. Values are computed eagerly on
/// push; [`Tape::backward`] replays the record in reverse exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar root with respect to every leaf that requires one.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(msg: String) -> NumericsError {
    NumericsError::Shape(msg)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_t(a, false, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_t(a, false, b, true)
    }

    fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var, NumericsError> {
        let value = matmul_t(self.value(a), ta, self.value(b), tb)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, ng))
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var, NumericsError> {
        let value = super::add(self.value(x), self.value(y))?;
        let ng = self.ng(x) || self.ng(y);
        Ok(self.push(value, Op::Add(x, y), ng))
    }

    /// Adds a `1 x cols` bias to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(shape_err(format!(
                "row bias {:?} for {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(value, Op::AddRow { x, bias }, ng))
    }

    /// Adds an `n x cols` tile to each consecutive block of `n` rows of `x`.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var, NumericsError> {
        let (xv, tv) = (self.value(x), self.value(tile));
        if tv.cols() != xv.cols() || tv.rows() == 0 || xv.rows() % tv.rows() != 0 {
            return Err(shape_err(format!(
                "tile {:?} over {:?}",
                tv.shape(),
                xv.shape()
            )));
        }
        let mut value = xv.clone();
        let n = tv.rows();
        for r in 0..value.rows() {
            for (v, t) in value.row_mut(r).iter_mut().zip(tv.row(r % n)) {
                *v += t;
            }
        }
        let ng = self.ng(x) || self.ng(tile);
        Ok(self.push(value, Op::AddTiled { x, tile }, ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).scale(factor);
        let ng = self.ng(x);
        self.push(value, Op::Scale { x, factor }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = super::relu(self.value(x));
        let ng = self.ng(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::row_vector(vec![self.value(x).sum()]);
        let ng = self.ng(x);
        self.push(value, Op::Sum(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let (value, cache) =
            layer_norm_forward(self.value(x), self.value(gamma), self.value(beta))?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            ng,
        ))
    }

    pub fn softmax(&mut self, x: Var, masking: Masking) -> Result<Var, NumericsError> {
        let (value, full) = softmax_forward(self.value(x), masking)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Softmax { x, masking, full }, ng))
    }

    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        seed: u64,
        training: bool,
    ) -> Result<Var, NumericsError> {
        match dropout_scales(self.value(x).len(), rate, seed, training)? {
            None => Ok(x),
            Some(scales) => {
                let mut value = self.value(x).clone();
                for (v, s) in value.data_mut().iter_mut().zip(&scales) {
                    *v *= s;
                }
                let ng = self.ng(x);
                Ok(self.push(value, Op::Dropout { x, scales }, ng))
            }
        }
    }

    /// Zeroes every row whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: Vec<bool>) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if keep.len() != xv.rows() {
            return Err(shape_err(format!(
                "{} row flags for {} rows",
                keep.len(),
                xv.rows()
            )));
        }
        let mut value = xv.clone();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                value.row_mut(r).fill(0.0);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(value, Op::MaskRows { x, keep }, ng))
    }

    /// Row lookup: output row `i` is `table[rows[i]]`.
    pub fn gather(&mut self, table: Var, rows: Vec<usize>) -> Result<Var, NumericsError> {
        let tv = self.value(table);
        if let Some(&bad) = rows.iter().find(|&&r| r >= tv.rows()) {
            return Err(shape_err(format!(
                "row index {bad} out of range for {} rows",
                tv.rows()
            )));
        }
        let mut value = Matrix::zeros(rows.len(), tv.cols());
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).copy_from_slice(tv.row(r));
        }
        let ng = self.ng(table);
        Ok(self.push(value, Op::Gather { table, rows }, ng))
    }

    /// Per-sequence, per-head scaled scores `scale · Q_bh K_bhᵀ`.
    ///
    /// `q` and `k` are `(B·seq) x d`; head `h` owns columns `h·d/H..(h+1)·d/H`.
    /// The result stacks the `seq x seq` blocks in `(b, h)` order.
    pub fn attn_scores(
        &mut self,
        q: Var,
        k: Var,
        seq: usize,
        heads: usize,
        scale: f64,
    ) -> Result<Var, NumericsError> {
        let (qv, kv) = (self.value(q), self.value(k));
        let (rows, d) = qv.shape();
        if kv.shape() != qv.shape() || seq == 0 || rows % seq != 0 || heads == 0 || d % heads != 0
        {
            return Err(shape_err(format!(
                "attention scores for q {:?}, k {:?}, seq {seq}, heads {heads}",
                qv.shape(),
                kv.shape()
            )));
        }
        let batch = rows / seq;
        let dh = d / heads;
        let mut value = Matrix::zeros(batch * heads * seq, seq);
        for b in 0..batch {
            for h in 0..heads {
                let qb = View::block(qv.data(), d, b * seq, h * dh, seq, dh);
                let kb = View::block(kv.data(), d, b * seq, h * dh, seq, dh);
                let out =
                    ViewMut::block(value.data_mut(), seq, (b * heads + h) * seq, 0, seq, seq);
                gemm(scale, qb, kb.t(), 0.0, out);
            }
        }
        let ng = self.ng(q) || self.ng(k);
        Ok(self.push(
            value,
            Op::AttnScores {
                q,
                k,
                heads,
                seq,
                scale,
            },
            ng,
        ))
    }

    /// Weighted sum of value rows. With `shared`, `attn` is one `seq x seq`
    /// matrix applied to every sequence; otherwise it is the stacked output
    /// of [`Tape::attn_scores`] after normalization.
    pub fn attn_apply(
        &mut self,
        attn: Var,
        values: Var,
        heads: usize,
        shared: bool,
    ) -> Result<Var, NumericsError> {
        let (av, vv) = (self.value(attn), self.value(values));
        let seq = av.cols();
        let (rows, d) = vv.shape();
        let heads = if shared { 1 } else { heads };
        let ok = seq > 0
            && rows % seq == 0
            && heads > 0
            && d % heads == 0
            && if shared {
                av.rows() == seq
            } else {
                av.rows() == (rows / seq) * heads * seq
            };
        if !ok {
            return Err(shape_err(format!(
                "attention {:?} over values {:?} (heads {heads}, shared {shared})",
                av.shape(),
                vv.shape()
            )));
        }
        let batch = rows / seq;
        let dh = d / heads;
        let mut value = Matrix::zeros(rows, d);
        for b in 0..batch {
            for h in 0..heads {
                let a = if shared {
                    av.view()
                } else {
                    View::block(av.data(), seq, (b * heads + h) * seq, 0, seq, seq)
                };
                let v = View::block(vv.data(), d, b * seq, h * dh, seq, dh);
                gemm(
                    1.0,
                    a,
                    v,
                    0.0,
                    ViewMut::block(value.data_mut(), d, b * seq, h * dh, seq, dh),
                );
            }
        }
        let ng = self.ng(attn) || self.ng(values);
        Ok(self.push(
            value,
            Op::AttnApply {
                attn,
                values,
                heads,
                shared,
            },
            ng,
        ))
    }

    /// Mean negative log-likelihood of `targets` under a row softmax that
    /// excludes column 0. Produces a `1 x 1` value.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var, NumericsError> {
        let lv = self.value(logits);
        let (rows, cols) = lv.shape();
        if rows == 0 || rows != targets.len() || cols < 2 {
            return Err(shape_err(format!(
                "cross entropy over {:?} with {} targets",
                lv.shape(),
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t == 0 || t >= cols) {
            return Err(shape_err(format!("target {bad} outside 1..{cols}")));
        }
        let mut probs = Matrix::zeros(rows, cols);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv.row(r)[1..];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            total += log_z - lv.get(r, t);
            let p = &mut probs.row_mut(r)[1..];
            for (pi, v) in p.iter_mut().zip(row) {
                *pi = (v - log_z).exp();
            }
        }
        let value = Matrix::row_vector(vec![total / rows as f64]);
        let ng = self.ng(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            ng,
        ))
    }

    /// `cross_entropy(hidden · tableᵀ, targets)` without materializing the
    /// full logit matrix; logits are recomputed chunk by chunk on backward.
    pub fn tied_cross_entropy(
        &mut self,
        hidden: Var,
        table: Var,
        targets: Vec<usize>,
    ) -> Result<Var, NumericsError> {
        let (hv, tv) = (self.value(hidden), self.value(table));
        let (rows, cols) = (hv.rows(), tv.rows());
        if rows == 0 || rows != targets.len() || cols < 2 || hv.cols() != tv.cols() {
            return Err(shape_err(format!(
                "tied cross entropy of {:?} against table {:?} with {} targets",
                hv.shape(),
                tv.shape(),
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t == 0 || t >= cols) {
            return Err(shape_err(format!("target {bad} outside 1..{cols}")));
        }
        let d = hv.cols();
        let mut log_z = Vec::with_capacity(rows);
        let mut total = 0.0;
        let mut logits = Matrix::zeros(CE_CHUNK.min(rows), cols);
        for start in (0..rows).step_by(CE_CHUNK) {
            let len = CE_CHUNK.min(rows - start);
            gemm(
                1.0,
                View::block(hv.data(), d, start, 0, len, d),
                tv.view_t(),
                0.0,
                ViewMut::block(logits.data_mut(), cols, 0, 0, len, cols),
            );
            for r in 0..len {
                let row = &logits.row(r)[1..];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let lz = max + z.ln();
                total += lz - logits.get(r, targets[start + r]);
                log_z.push(lz);
            }
        }
        let value = Matrix::row_vector(vec![total / rows as f64]);
        let ng = self.ng(hidden) || self.ng(table);
        Ok(self.push(
            value,
            Op::TiedCrossEntropy {
                hidden,
                table,
                targets,
                log_z,
            },
            ng,
        ))
    }

    /// Reverse-mode pass from a scalar root. The tape can be replayed once.
    pub fn backward(&mut self, root: Var) -> Result<Gradients, NumericsError> {
        if self.consumed {
            return Err(NumericsError::TapeConsumed);
        }
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(NumericsError::NonScalarRoot(rv.rows(), rv.cols()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, contribution: Matrix| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        let val = |v: Var| &nodes[v.0].value;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                // C = op(A)·op(B)
                if nodes[a.0].needs_grad {
                    // d op(A) = G·op(B)ᵀ
                    let da = if *ta {
                        // dA = op(B)·Gᵀ
                        matmul_t(val(*b), *tb, g, true)
                    } else {
                        matmul_t(g, false, val(*b), !*tb)
                    };
                    acc(*a, da.expect("matmul backward shapes"));
                }
                if nodes[b.0].needs_grad {
                    let db = if *tb {
                        // dB = Gᵀ·op(A)
                        matmul_t(g, true, val(*a), *ta)
                    } else {
                        matmul_t(val(*a), !*ta, g, false)
                    };
                    acc(*b, db.expect("matmul backward shapes"));
                }
            }
            Op::Add(x, y) => {
                acc(*x, g.clone());
                acc(*y, g.clone());
            }
            Op::AddRow { x, bias } => {
                acc(*x, g.clone());
                let mut db = vec![0.0; g.cols()];
                for row in g.iter_rows() {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*bias, Matrix::row_vector(db));
            }
            Op::AddTiled { x, tile } => {
                acc(*x, g.clone());
                let tv = val(*tile);
                let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                for r in 0..g.rows() {
                    for (d, v) in dt.row_mut(r % tv.rows()).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                acc(*tile, dt);
            }
            Op::Scale { x, factor } => acc(*x, g.scale(*factor)),
            Op::Relu(x) => {
                let xv = val(*x);
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                acc(*x, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let gv = val(*gamma);
                let (rows, cols) = g.shape();
                let n = cols as f64;
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                let mut dx = Matrix::zeros(rows, cols);
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let gr = g.row(r);
                    let xh = cache.normalized.row(r);
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..cols {
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gv.data()[j];
                        sum_d += dxhat[j];
                        sum_dx += dxhat[j] * xh[j];
                    }
                    let inv = cache.inv_std[r];
                    let out = dx.row_mut(r);
                    for j in 0..cols {
                        out[j] = inv / n * (n * dxhat[j] - sum_d - xh[j] * sum_dx);
                    }
                }
                acc(*x, dx);
                acc(*gamma, Matrix::row_vector(dgamma));
                acc(*beta, Matrix::row_vector(dbeta));
            }
            Op::Softmax { x, masking, full } => {
                // y = softmax(x) (optionally zeroed after): dx = p ⊙ (dp − Σ dp⊙p)
                let y = &nodes[i].value;
                let (rows, cols) = y.shape();
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let (p, dp): (&[f64], Vec<f64>) = match (masking, full) {
                        (Masking::CausalAfterSoftmax, Some(full)) => {
                            let keep = r % cols + 1;
                            let mut dp = g.row(r).to_vec();
                            for d in &mut dp[keep..] {
                                *d = 0.0;
                            }
                            (full.row(r), dp)
                        }
                        _ => (y.row(r), g.row(r).to_vec()),
                    };
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for (o, (pi, di)) in dx.row_mut(r).iter_mut().zip(p.iter().zip(&dp)) {
                        *o = pi * (di - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::Dropout { x, scales } => {
                let mut dx = g.clone();
                for (d, s) in dx.data_mut().iter_mut().zip(scales) {
                    *d *= s;
                }
                acc(*x, dx);
            }
            Op::MaskRows { x, keep } => {
                let mut dx = g.clone();
                for (r, &k) in keep.iter().enumerate() {
                    if !k {
                        dx.row_mut(r).fill(0.0);
                    }
                }
                acc(*x, dx);
            }
            Op::Gather { table, rows } => {
                let tv = val(*table);
                let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for (d, v) in dt.row_mut(r).iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                acc(*table, dt);
            }
            Op::AttnScores {
                q,
                k,
                heads,
                seq,
                scale,
            } => {
                let (qv, kv) = (val(*q), val(*k));
                let (rows, d) = qv.shape();
                let (batch, dh, seq, heads) = (rows / seq, d / heads, *seq, *heads);
                let mut dq = Matrix::zeros(rows, d);
                let mut dk = Matrix::zeros(rows, d);
                for b in 0..batch {
                    for h in 0..heads {
                        let gs = View::block(g.data(), seq, (b * heads + h) * seq, 0, seq, seq);
                        let kb = View::block(kv.data(), d, b * seq, h * dh, seq, dh);
                        let qb = View::block(qv.data(), d, b * seq, h * dh, seq, dh);
                        gemm(
                            *scale,
                            gs,
                            kb,
                            0.0,
                            ViewMut::block(dq.data_mut(), d, b * seq, h * dh, seq, dh),
                        );
                        gemm(
                            *scale,
                            gs.t(),
                            qb,
                            0.0,
                            ViewMut::block(dk.data_mut(), d, b * seq, h * dh, seq, dh),
                        );
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
            }
            Op::AttnApply {
                attn,
                values,
                heads,
                shared,
            } => {
                let (av, vv) = (val(*attn), val(*values));
                let seq = av.cols();
                let (rows, d) = vv.shape();
                let (batch, heads) = (rows / seq, *heads);
                let dh = d / heads;
                let mut da = Matrix::zeros(av.rows(), av.cols());
                let mut dv = Matrix::zeros(rows, d);
                for b in 0..batch {
                    for h in 0..heads {
                        let gb = View::block(g.data(), d, b * seq, h * dh, seq, dh);
                        let vb = View::block(vv.data(), d, b * seq, h * dh, seq, dh);
                        let (a, da_block, beta) = if *shared {
                            (av.view(), ViewMut::full(da.data_mut(), seq, seq), 1.0)
                        } else {
                            let r0 = (b * heads + h) * seq;
                            (
                                View::block(av.data(), seq, r0, 0, seq, seq),
                                ViewMut::block(da.data_mut(), seq, r0, 0, seq, seq),
                                0.0,
                            )
                        };
                        gemm(1.0, gb, vb.t(), beta, da_block);
                        gemm(
                            1.0,
                            a.t(),
                            gb,
                            0.0,
                            ViewMut::block(dv.data_mut(), d, b * seq, h * dh, seq, dh),
                        );
                    }
                }
                acc(*attn, da);
                acc(*values, dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.get(0, 0) / targets.len() as f64;
                let mut dl = probs.scale(scale);
                for (r, &t) in targets.iter().enumerate() {
                    let v = dl.get(r, t) - scale;
                    dl.set(r, t, v);
                }
                acc(*logits, dl);
            }
            Op::TiedCrossEntropy {
                hidden,
                table,
                targets,
                log_z,
            } => {
                let (hv, tv) = (val(*hidden), val(*table));
                let (rows, d, cols) = (hv.rows(), hv.cols(), tv.rows());
                let scale = g.get(0, 0) / rows as f64;
                let mut dh = Matrix::zeros(rows, d);
                let mut dt = Matrix::zeros(cols, d);
                let mut p = Matrix::zeros(CE_CHUNK.min(rows), cols);
                for start in (0..rows).step_by(CE_CHUNK) {
                    let len = CE_CHUNK.min(rows - start);
                    gemm(
                        1.0,
                        View::block(hv.data(), d, start, 0, len, d),
                        tv.view_t(),
                        0.0,
                        ViewMut::block(p.data_mut(), cols, 0, 0, len, cols),
                    );
                    for r in 0..len {
                        let lz = log_z[start + r];
                        let row = p.row_mut(r);
                        row[0] = 0.0;
                        for v in &mut row[1..] {
                            *v = (*v - lz).exp() * scale;
                        }
                        row[targets[start + r]] -= scale;
                    }
                    let pv = View::block(p.data(), cols, 0, 0, len, cols);
                    gemm(
                        1.0,
                        pv,
                        tv.view(),
                        0.0,
                        ViewMut::block(dh.data_mut(), d, start, 0, len, d),
                    );
                    gemm(
                        1.0,
                        pv.t(),
                        View::block(hv.data(), d, start, 0, len, d),
                        1.0,
                        ViewMut::full(dt.data_mut(), cols, d),
                    );
                }
                acc(*hidden, dh);
                acc(*table, dt);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tied_cross_entropy_matches_explicit_logits() {
        let h: Vec<f64> = (0..600 * 3).map(|v| ((v * 37 % 101) as f64 / 50.0) - 1.0).collect();
        let t: Vec<f64> = (0..7 * 3).map(|v| ((v * 13 % 17) as f64 / 8.0) - 1.0).collect();
        let targets: Vec<usize> = (0..600).map(|r| 1 + r % 6).collect();
        let run = |fused: bool| {
            let mut tape = Tape::new();
            let hv = tape.param(Matrix::from_vec(600, 3, h.clone()).unwrap());
            let tv = tape.param(Matrix::from_vec(7, 3, t.clone()).unwrap());
            let loss = if fused {
                tape.tied_cross_entropy(hv, tv, targets.clone()).unwrap()
            } else {
                let logits = tape.matmul_nt(hv, tv).unwrap();
                tape.cross_entropy(logits, targets.clone()).unwrap()
            };
            let value = tape.value(loss).get(0, 0);
            let mut g = tape.backward(loss).unwrap();
            (value, g.take(hv).unwrap(), g.take(tv).unwrap())
        };
        let (l1, h1, t1) = run(true);
        let (l2, h2, t2) = run(false);
        assert!((l1 - l2).abs() < 1e-12);
        assert!(h1.max_abs_diff(&h2) < 1e-12);
        assert!(t1.max_abs_diff(&t2) < 1e-12);
    }

    #[test]
    fn sum_of_matmul_has_closed_form_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.param(Matrix::from_vec(3, 2, vec![1., -1., 0.5, 2., 0., 1.]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        // d/dA sum(AB) = 1·Bᵀ
        let da = grads.get(a).unwrap();
        assert_eq!(da.row(0), &[0.0, 2.5, 1.0]);
        assert_eq!(da.row(1), &[0.0, 2.5, 1.0]);
        let db = grads.get(b).unwrap();
        assert_eq!(db.data(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::filled(1, 1, 2.0));
        let s = tape.sum(a);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(NumericsError::TapeConsumed)));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::zeros(2, 2));
        assert!(matches!(
            tape.backward(a),
            Err(NumericsError::NonScalarRoot(2, 2))
        ));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::filled(2, 2, 1.0));
        let c = tape.constant(Matrix::filled(2, 2, 3.0));
        let p = tape.matmul(a, c).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(a).is_some());
    }

    #[test]
    fn cross_entropy_hand_case() {
        // logits [2, 0] over items 1 and 2, target item 1
        let mut tape = Tape::new();
        let l = tape.param(Matrix::row_vector(vec![0.0, 2.0, 0.0]));
        let loss = tape.cross_entropy(l, vec![1]).unwrap();
        let expected = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((tape.value(loss).get(0, 0) - expected).abs() < 1e-14);
        assert!((expected - 0.1269).abs() < 1e-4);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(l).unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn cross_entropy_single_item_is_zero() {
        let mut tape = Tape::new();
        let l = tape.param(Matrix::row_vector(vec![5.0, -3.0]));
        let loss = tape.cross_entropy(l, vec![1]).unwrap();
        assert_eq!(tape.value(loss).get(0, 0), 0.0);
        assert!(tape.cross_entropy(l, vec![0]).is_err());
        assert!(tape.cross_entropy(l, vec![]).is_err());
    }

    #[test]
    fn shared_and_per_sequence_apply_agree_when_attention_is_repeated() {
        let mut tape = Tape::new();
        let a = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.25, 0.75]).unwrap();
        let mut stacked = Matrix::zeros(4, 2);
        for r in 0..4 {
            stacked.row_mut(r).copy_from_slice(a.row(r % 2));
        }
        let v = tape.constant(Matrix::from_vec(4, 3, (0..12).map(f64::from).collect()).unwrap());
        let sa = tape.constant(a);
        let st = tape.constant(stacked);
        let o1 = tape.attn_apply(sa, v, 1, true).unwrap();
        let o2 = tape.attn_apply(st, v, 1, false).unwrap();
        assert_eq!(tape.value(o1), tape.value(o2));
        assert_eq!(tape.value(o1).row(1), &[2.25, 3.25, 4.25]);
    }
}
