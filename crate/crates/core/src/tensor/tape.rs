use rand::Rng;

use super::kernels;
use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
}

impl UnaryOp {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Gelu => kernels::gelu(x),
            UnaryOp::Sigmoid => kernels::sigmoid(x),
            UnaryOp::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Gelu => kernels::gelu_grad(x),
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Tanh => 1.0 - y * y,
        }
    }
}

/// Sparse weighted row combination: `out[i] = Σ_e weight_e · x[source_e]`
/// over the entries registered for row `i`.
///
/// The forward sum for each output coordinate is taken over the terms in
/// ascending value order, so the result does not depend on the order in
/// which entries were pushed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CombinePlan {
    offsets: Vec<usize>,
    sources: Vec<usize>,
    weights: Vec<f64>,
}

impl CombinePlan {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            sources: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (src, w) in entries {
            self.sources.push(src);
            self.weights.push(w);
        }
        self.offsets.push(self.sources.len());
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Total number of (row, source) terms.
    pub fn terms(&self) -> usize {
        self.sources.len()
    }

    fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.offsets[i]..self.offsets[i + 1];
        (&self.sources[r.clone()], &self.weights[r])
    }

    fn max_source(&self) -> Option<usize> {
        self.sources.iter().copied().max()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Unary(Var, UnaryOp),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    TokenLogProbs {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Unlikelihood(Var),
    Bce {
        scores: Var,
        labels: Vec<f64>,
    },
    Combine {
        x: Var,
        plan: CombinePlan,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    bytes: usize,
}

/// Upper bound applied to per-token probabilities inside the unlikelihood term.
pub const UNLIKELIHOOD_CLAMP: f64 = 1.0 - 1e-6;
/// Lower/upper clamp for binary cross-entropy scores.
pub const BCE_CLAMP: f64 = 1e-12;

/// Records operations for one forward pass and runs the reverse sweep.
///
/// An optional memory limit turns allocation beyond the budget into
/// [`TensorError::OutOfMemory`] instead of growing without bound.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    live_bytes: usize,
    peak_bytes: usize,
    limit: Option<usize>,
}

fn shape2(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_memory_limit(bytes: usize) -> Self {
        Self {
            limit: Some(bytes),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn live_bytes(&self) -> usize {
        self.live_bytes
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Drops every node recorded after the first `len`, along with any gradients.
    pub fn truncate(&mut self, len: usize) {
        while self.nodes.len() > len {
            let node = self.nodes.pop().expect("non-empty");
            self.live_bytes -= node.bytes;
        }
        self.clear_grads();
    }

    fn clear_grads(&mut self) {
        for g in self.grads.drain(..).flatten() {
            self.live_bytes -= g.len() * 8;
        }
    }

    fn charge(&mut self, bytes: usize) -> Result<()> {
        let next = self.live_bytes + bytes;
        if let Some(limit) = self.limit {
            if next > limit {
                return Err(TensorError::OutOfMemory {
                    requested: next,
                    limit,
                });
            }
        }
        self.live_bytes = next;
        self.peak_bytes = self.peak_bytes.max(next);
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, extra_bytes: usize) -> Result<Var> {
        let bytes = value.len() * 8 + extra_bytes;
        self.charge(bytes)?;
        if !value.all_finite() {
            log::debug!("non-finite value produced by {:?}", std::mem::discriminant(&op));
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            bytes,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, 0)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let dims = shape2(ta).zip(shape2(tb));
        let ((m, k), (k2, n)) = match dims {
            Some(d) if d.0 .1 == d.1 .0 => d,
            _ => {
                return Err(TensorError::Dimension {
                    op: "matmul",
                    left: ta.shape().to_vec(),
                    right: tb.shape().to_vec(),
                })
            }
        };
        debug_assert_eq!(k, k2);
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg, 0)
    }

    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || tb.is_scalar() {
            Ok(ta.shape().to_vec())
        } else if ta.is_scalar() {
            Ok(tb.shape().to_vec())
        } else {
            Err(TensorError::Dimension {
                op,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            })
        }
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let shape = self.broadcast_pair(op, a, b)?;
        let n: usize = shape.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        Ok((0..n).map(|i| f(at(da, i), at(db, i))).collect())
    }

    /// Elementwise sum; operands must share a shape or one must be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_pair("add", a, b)?;
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg, 0)
    }

    /// Elementwise product; operands must share a shape or one must be a scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_pair("mul", a, b)?;
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg, 0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg, 0)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.cols();
        if tb.len() != n || shape2(tx).is_none() {
            return Err(TensorError::Dimension {
                op: "add_row",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, bias]);
        self.push(value, Op::AddRow(x, bias), rg, 0)
    }

    pub fn unary(&mut self, x: Var, op: UnaryOp) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| op.apply(v)).collect())?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Unary(x, op), rg, 0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Tanh)
    }

    /// Row-wise softmax of a matrix (a vector is treated as one row).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        let mut out = t.data().to_vec();
        out.chunks_exact_mut(n).for_each(kernels::softmax_in_place);
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::SoftmaxRows(x), rg, 0)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols();
        if tg.len() != n || tb.len() != n {
            return Err(TensorError::Dimension {
                op: "layer_norm",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let rows = tx.rows();
        let mut out = vec![0.0; rows * n];
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = i * n..(i + 1) * n;
            rstd.push(kernels::layer_norm_row(
                &tx.data()[r.clone()],
                tg.data(),
                tb.data(),
                &mut out[r.clone()],
                &mut xhat[r],
            ));
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        let extra = (xhat.len() + rstd.len()) * 8;
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg, extra)
    }

    /// Multi-head causal self-attention over `T×D` query/key/value matrices.
    /// Position `t` attends to positions `0..=t` only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = shape2(tq).ok_or_else(|| TensorError::Dimension {
            op: "causal_attention",
            left: tq.shape().to_vec(),
            right: tk.shape().to_vec(),
        })?;
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() || heads == 0 || d % heads != 0 {
            return Err(TensorError::Dimension {
                op: "causal_attention",
                left: tq.shape().to_vec(),
                right: tk.shape().to_vec(),
            });
        }
        let extra = heads * t * t * 8;
        if let Some(limit) = self.limit {
            let requested = self.live_bytes + extra + t * d * 8;
            if requested > limit {
                return Err(TensorError::OutOfMemory { requested, limit });
            }
        }
        let mut out = vec![0.0; t * d];
        let mut probs = vec![0.0; heads * t * t];
        let mut row_probs = vec![0.0; heads * t];
        for i in 0..t {
            let n_keys = i + 1;
            kernels::attend_row(
                &tq.data()[i * d..(i + 1) * d],
                tk.data(),
                tv.data(),
                n_keys,
                heads,
                &mut out[i * d..(i + 1) * d],
                &mut row_probs[..heads * n_keys],
            );
            for h in 0..heads {
                let dst = (h * t + i) * t;
                probs[dst..dst + n_keys].copy_from_slice(&row_probs[h * n_keys..(h + 1) * n_keys]);
            }
        }
        let value = Tensor::new(vec![t, d], out)?;
        let rg = self.rg(&[q, k, v]);
        self.push(value, Op::CausalAttention { q, k, v, heads, probs }, rg, extra)
    }

    /// Embedding lookup: rows `ids` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = shape2(t).ok_or_else(|| TensorError::Dimension {
            op: "gather_rows",
            left: t.shape().to_vec(),
            right: vec![ids.len()],
        })?;
        if ids.is_empty() {
            return Err(TensorError::Contract("gather_rows needs at least one id".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Dimension {
                op: "gather_rows",
                left: vec![v, d],
                right: vec![bad],
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        self.push(value, Op::GatherRows { table, ids: ids.to_vec() }, rg, ids.len() * 8)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape2(t).is_none() || rows.is_empty() || rows.iter().any(|&r| r >= t.rows()) {
            return Err(TensorError::Dimension {
                op: "select_rows",
                left: t.shape().to_vec(),
                right: rows.to_vec(),
            });
        }
        let d = t.cols();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let value = Tensor::new(vec![rows.len(), d], out)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::SelectRows { x, rows: rows.to_vec() }, rg, rows.len() * 8)
    }

    /// Stacks matrices (or row vectors) with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows needs at least one input".into()))?;
        let d = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != d {
                return Err(TensorError::Dimension {
                    op: "concat_rows",
                    left: vec![d],
                    right: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let rg = self.rg(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg, parts.len() * 8)
    }

    /// Column means of a matrix, as a `1×n` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; n];
        for row in t.data().chunks_exact(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let value = Tensor::new(vec![1, n], out)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::MeanRows(x), rg, 0)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, 0)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg, 0)
    }

    /// Log-probability of `targets[i]` under the softmax of logits row `i`.
    pub fn token_log_probs(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (m, v) = shape2(t).ok_or_else(|| TensorError::Dimension {
            op: "token_log_probs",
            left: t.shape().to_vec(),
            right: vec![targets.len()],
        })?;
        if targets.len() != m || targets.iter().any(|&x| x >= v) {
            return Err(TensorError::Dimension {
                op: "token_log_probs",
                left: vec![m, v],
                right: vec![targets.len()],
            });
        }
        let mut out = Vec::with_capacity(m);
        let mut probs = Vec::with_capacity(m * v);
        for (i, row) in t.data().chunks_exact(v).enumerate() {
            let lp = kernels::log_softmax(row);
            out.push(lp[targets[i]]);
            probs.extend(lp.iter().map(|x| x.exp()));
        }
        let value = Tensor::vector(out);
        let rg = self.rg(&[logits]);
        let extra = probs.len() * 8;
        self.push(
            value,
            Op::TokenLogProbs {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
            extra,
        )
    }

    /// Elementwise `-ln(1 - min(exp(lp), 1 - 1e-6))` over log-probabilities.
    pub fn unlikelihood(&mut self, logp: Var) -> Result<Var> {
        let t = self.value(logp);
        let out = t
            .data()
            .iter()
            .map(|&lp| -(1.0 - lp.exp().min(UNLIKELIHOOD_CLAMP)).ln())
            .collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[logp]);
        self.push(value, Op::Unlikelihood(logp), rg, 0)
    }

    /// Mean binary cross-entropy of `scores` (probabilities) against 0/1 labels,
    /// with scores clamped to `[1e-12, 1 - 1e-12]`.
    pub fn bce(&mut self, scores: Var, labels: &[f64]) -> Result<Var> {
        let t = self.value(scores);
        if t.len() != labels.len() {
            return Err(TensorError::Dimension {
                op: "bce",
                left: t.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let n = labels.len() as f64;
        let total: f64 = t
            .data()
            .iter()
            .zip(labels)
            .map(|(&f, &y)| {
                let f = f.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                y * f.ln() + (1.0 - y) * (1.0 - f).ln()
            })
            .sum();
        let rg = self.rg(&[scores]);
        self.push(
            Tensor::scalar(-total / n),
            Op::Bce {
                scores,
                labels: labels.to_vec(),
            },
            rg,
            labels.len() * 8,
        )
    }

    pub fn combine(&mut self, x: Var, plan: CombinePlan) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        if plan.max_source().is_some_and(|s| s >= t.rows()) || plan.out_rows() == 0 {
            return Err(TensorError::Dimension {
                op: "combine",
                left: t.shape().to_vec(),
                right: vec![plan.out_rows(), plan.max_source().unwrap_or(0)],
            });
        }
        let mut out = vec![0.0; plan.out_rows() * d];
        let mut terms: Vec<f64> = Vec::new();
        for i in 0..plan.out_rows() {
            let (sources, weights) = plan.row(i);
            for c in 0..d {
                terms.clear();
                terms.extend(sources.iter().zip(weights).map(|(&s, &w)| w * t.data()[s * d + c]));
                terms.sort_by(f64::total_cmp);
                out[i * d + c] = terms.iter().sum();
            }
        }
        let value = Tensor::new(vec![plan.out_rows(), d], out)?;
        let rg = self.rg(&[x]);
        let extra = plan.terms() * 16;
        self.push(value, Op::Combine { x, plan }, rg, extra)
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let t = self.value(x);
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        let extra = mask.len() * 8;
        self.push(value, Op::Dropout { x, mask }, rg, extra)
    }

    /// Reverse sweep from a scalar loss. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_with(loss, &[1.0])
    }

    /// Reverse sweep seeded with an explicit output cotangent.
    pub fn backward_with(&mut self, output: Var, seed: &[f64]) -> Result<()> {
        if seed.len() != self.value(output).len() {
            return Err(TensorError::Dimension {
                op: "backward",
                left: self.shape(output).to_vec(),
                right: vec![seed.len()],
            });
        }
        self.clear_grads();
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.charge(seed.len() * 8)?;
        self.grads[output.0] = Some(seed.to_vec());
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        // Leaves off the loss path still get an explicit zero gradient.
        for i in 0..self.nodes.len() {
            if self.nodes[i].requires_grad && matches!(self.nodes[i].op, Op::Leaf) && self.grads[i].is_none() {
                let n = self.nodes[i].value.len();
                self.charge(n * 8)?;
                self.grads[i] = Some(vec![0.0; n]);
            }
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the value, zero if none was recorded.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }

    fn accum(&mut self, v: Var) -> Result<Option<&mut Vec<f64>>> {
        if !self.nodes[v.0].requires_grad {
            return Ok(None);
        }
        if self.grads[v.0].is_none() {
            let n = self.nodes[v.0].value.len();
            self.charge(n * 8)?;
            self.grads[v.0] = Some(vec![0.0; n]);
        }
        Ok(self.grads[v.0].as_mut())
    }

    fn add_into(&mut self, v: Var, g: &[f64]) -> Result<()> {
        if let Some(dst) = self.accum(v)? {
            if dst.len() == g.len() {
                dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
            } else {
                // Scalar operand broadcast over a larger output.
                dst[0] += g.iter().sum::<f64>();
            }
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) -> Result<()> {
        // Temporarily move the op out so its saved buffers can be read while
        // input gradients are mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let result = self.propagate_op(&op, i, g);
        self.nodes[i].op = op;
        result
    }

    fn propagate_op(&mut self, op: &Op, i: usize, g: &[f64]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = shape2(self.value(*a)).expect("checked in forward");
                let n = self.value(*b).cols();
                if self.requires_grad(*a) {
                    let bv = self.value(*b).data().to_vec();
                    let da = self.accum(*a)?.expect("requires grad");
                    kernels::matmul_grad_a(g, &bv, da, m, k, n);
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data().to_vec();
                    let db = self.accum(*b)?.expect("requires grad");
                    kernels::matmul_grad_b(&av, g, db, m, k, n);
                }
            }
            Op::Add(a, b) => {
                self.add_into(*a, g)?;
                self.add_into(*b, g)?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                let at = |d: &[f64], j: usize| if d.len() == 1 { d[0] } else { d[j] };
                let ga: Vec<f64> = g.iter().enumerate().map(|(j, x)| x * at(&vb, j)).collect();
                let gb: Vec<f64> = g.iter().enumerate().map(|(j, x)| x * at(&va, j)).collect();
                self.add_into(*a, &ga)?;
                self.add_into(*b, &gb)?;
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.add_into(*a, &ga)?;
            }
            Op::AddRow(x, bias) => {
                self.add_into(*x, g)?;
                let n = self.value(*bias).len();
                let mut gb = vec![0.0; n];
                for row in g.chunks_exact(n) {
                    gb.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                }
                self.add_into(*bias, &gb)?;
            }
            Op::Unary(x, op) => {
                let xv = self.value(*x).data();
                let yv = self.nodes[i].value.data();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(gi, (&a, &y))| gi * op.derivative(a, y))
                    .collect();
                self.add_into(*x, &gx)?;
            }
            Op::SoftmaxRows(x) => {
                let y = self.nodes[i].value.data();
                let n = self.nodes[i].value.cols();
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                    let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.add_into(*x, &gx)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.value(*x).cols();
                let gv = self.value(*gain).data().to_vec();
                let mut gx = vec![0.0; g.len()];
                let mut ggain = vec![0.0; n];
                let mut gbias = vec![0.0; n];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    let xr = &xhat[r * n..(r + 1) * n];
                    let gxhat: Vec<f64> = gr.iter().zip(&gv).map(|(a, b)| a * b).collect();
                    let mean_g = gxhat.iter().sum::<f64>() / n as f64;
                    let mean_gx = gxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx[r * n + j] = rs * (gxhat[j] - mean_g - xr[j] * mean_gx);
                        ggain[j] += gr[j] * xr[j];
                        gbias[j] += gr[j];
                    }
                }
                self.add_into(*x, &gx)?;
                self.add_into(*gain, &ggain)?;
                self.add_into(*bias, &gbias)?;
            }
            Op::CausalAttention { q, k, v, heads, probs } => {
                let (t, d) = shape2(self.value(*q)).expect("checked in forward");
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut gq = vec![0.0; t * d];
                let mut gk = vec![0.0; t * d];
                let mut gvv = vec![0.0; t * d];
                let mut dp = vec![0.0; t];
                for h in 0..*heads {
                    let c0 = h * dh;
                    for row in 0..t {
                        let p = &probs[(h * t + row) * t..(h * t + row) * t + row + 1];
                        let go = &g[row * d + c0..row * d + c0 + dh];
                        for j in 0..=row {
                            dp[j] = kernels::dot(go, &vv[j * d + c0..j * d + c0 + dh]);
                            let gv_row = &mut gvv[j * d + c0..j * d + c0 + dh];
                            for (a, &b) in gv_row.iter_mut().zip(go) {
                                *a += p[j] * b;
                            }
                        }
                        let s: f64 = (0..=row).map(|j| p[j] * dp[j]).sum();
                        let qrow = &qv[row * d + c0..row * d + c0 + dh];
                        for j in 0..=row {
                            let ds = p[j] * (dp[j] - s) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = &kv[j * d + c0..j * d + c0 + dh];
                            for (a, &b) in gq[row * d + c0..row * d + c0 + dh].iter_mut().zip(krow) {
                                *a += ds * b;
                            }
                            for (a, &b) in gk[j * d + c0..j * d + c0 + dh].iter_mut().zip(qrow) {
                                *a += ds * b;
                            }
                        }
                    }
                }
                self.add_into(*q, &gq)?;
                self.add_into(*k, &gk)?;
                self.add_into(*v, &gvv)?;
            }
            Op::GatherRows { table, ids } => {
                if self.requires_grad(*table) {
                    let d = self.value(*table).cols();
                    let dst = self.accum(*table)?.expect("requires grad");
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dst[id * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if self.requires_grad(*x) {
                    let d = self.value(*x).cols();
                    let dst = self.accum(*x)?.expect("requires grad");
                    for (r, &src) in rows.iter().enumerate() {
                        for c in 0..d {
                            dst[src * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.add_into(p, &g[offset..offset + n])?;
                    offset += n;
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = (self.value(*x).rows(), self.value(*x).cols());
                let mut gx = Vec::with_capacity(m * n);
                for _ in 0..m {
                    gx.extend(g.iter().map(|v| v / m as f64));
                }
                self.add_into(*x, &gx)?;
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.add_into(*x, &vec![g[0]; n])?;
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.add_into(*x, &vec![g[0] / n as f64; n])?;
            }
            Op::TokenLogProbs { logits, targets, probs } => {
                let v = self.value(*logits).cols();
                let mut gl: Vec<f64> = probs.iter().map(|p| -p).collect();
                for (r, &tgt) in targets.iter().enumerate() {
                    gl[r * v + tgt] += 1.0;
                    for c in 0..v {
                        gl[r * v + c] *= g[r];
                    }
                }
                self.add_into(*logits, &gl)?;
            }
            Op::Unlikelihood(x) => {
                let gx: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&lp, gi)| {
                        let p = lp.exp();
                        if p < UNLIKELIHOOD_CLAMP {
                            gi * p / (1.0 - p)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.add_into(*x, &gx)?;
            }
            Op::Bce { scores, labels } => {
                let n = labels.len() as f64;
                let gs: Vec<f64> = self
                    .value(*scores)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&f, &y)| {
                        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&f) {
                            0.0
                        } else {
                            -g[0] * (y / f - (1.0 - y) / (1.0 - f)) / n
                        }
                    })
                    .collect();
                self.add_into(*scores, &gs)?;
            }
            Op::Combine { x, plan } => {
                if self.requires_grad(*x) {
                    let d = self.value(*x).cols();
                    let dst = self.accum(*x)?.expect("requires grad");
                    for r in 0..plan.out_rows() {
                        let (sources, weights) = plan.row(r);
                        for (&s, &w) in sources.iter().zip(weights) {
                            for c in 0..d {
                                dst[s * d + c] += w * g[r * d + c];
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let gx: Vec<f64> = g.iter().zip(mask).map(|(a, m)| a * m).collect();
                self.add_into(*x, &gx)?;
            }
        }
        Ok(())
    }
}
