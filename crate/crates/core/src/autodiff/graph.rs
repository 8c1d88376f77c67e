//! Tape of tensor operations with reverse-mode gradients.

use std::sync::Arc;

use rand::{Rng, RngCore};

use super::gemm::{gemm, View, ViewMut};
use super::{AutodiffError, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Norms below this make cosine similarity 0 with zero gradient.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SoftmaxRows(Var),
    Gather { table: Var, ids: Vec<u32> },
    ScaleRows { x: Var, weights: Vec<f64> },
    Cosine { u: Var, v: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, seq: usize, probs: Vec<f64>, keep: Option<Vec<f64>> },
    Dropout { x: Var, keep: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<u32>, mask: Vec<bool>, probs: Vec<f64>, count: usize },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::Gather { .. } => "embedding_gather",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Cosine { .. } => "cosine_sim",
            Op::Attention { .. } => "causal_attention",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order. Gradients of leaves accumulate
/// across `backward` calls until [`Graph::zero_grad`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    check_finite: bool,
}

type Result<T> = std::result::Result<T, AutodiffError>;

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fault on the first non-finite value, naming the producing op.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf sharing the tensor's storage.
    pub fn param(&mut self, value: Arc<Tensor>) -> Var {
        self.push_leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Arc::new(value), requires_grad)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Arc<Tensor>) -> Var {
        self.push_leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `a · b`, or `a · bᵀ` when `trans_b`.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (bk, n) = if trans_b { (tb.shape()[1], tb.shape()[0]) } else { (tb.shape()[0], tb.shape()[1]) };
        if k != bk {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        let bv = if trans_b { View::new(tb.data(), 0, n, k, k).t() } else { View::new(tb.data(), 0, k, n, n) };
        gemm(1.0, View::new(ta.data(), 0, m, k, k), bv, 0.0, ViewMut::new(&mut out, 0, m, n, n));
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `m × n` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tr.numel() != n || ta.shape().is_empty() {
            return Err(shape_err("add_row", ta, tr));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(tr.data()).for_each(|(x, &r)| *x += r);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        self.push(t, Op::AddRow { a, row }, rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())?;
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()), Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Row-wise layer normalisation with gain and bias vectors.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(AutodiffError::InvalidArgument { op: "layer_norm", reason: format!("eps must be > 0, got {eps}") });
        }
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols();
        if tg.numel() != n {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.numel() != n {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let rows = tx.rows();
        let mut out = vec![0.0; tx.numel()];
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    /// Rows `ids` of a 2-D table, stacked.
    pub fn embedding_gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(AutodiffError::InvalidArgument { op: "embedding_gather", reason: "table must be 2-D".into() });
        }
        let (rows, d) = (tt.shape()[0], tt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= rows {
                return Err(AutodiffError::IndexOutOfRange { op: "embedding_gather", index: id as usize, bound: rows });
            }
            data.extend_from_slice(tt.row(id as usize));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(&[table]);
        self.push(t, Op::Gather { table, ids: ids.to_vec() }, rg)
    }

    /// Multiplies row `i` by the constant `weights[i]`.
    pub fn scale_rows(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let tx = self.value(x);
        if tx.rows() != weights.len() || tx.shape().is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "scale_rows",
                reason: format!("{} weights for shape {:?}", weights.len(), tx.shape()),
            });
        }
        let n = tx.cols();
        let mut data = tx.data().to_vec();
        for (row, &w) in data.chunks_mut(n).zip(weights) {
            row.iter_mut().for_each(|v| *v *= w);
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::ScaleRows { x, weights: weights.to_vec() }, rg)
    }

    /// Row-wise cosine similarity of two `m × d` tensors, giving `[m]`.
    pub fn cosine_sim(&mut self, u: Var, v: Var) -> Result<Var> {
        let (tu, tv) = (self.value(u), self.value(v));
        if tu.shape() != tv.shape() || tu.shape().is_empty() {
            return Err(shape_err("cosine_sim", tu, tv));
        }
        let rows = tu.rows();
        let out = (0..rows).map(|r| cosine(tu.row(r), tv.row(r))).collect();
        let rg = self.rg(&[u, v]);
        self.push(Tensor::new(vec![rows], out)?, Op::Cosine { u, v }, rg)
    }

    /// Multi-head causal self-attention over `[batch * seq, d]` inputs. Position
    /// `i` of each sequence attends to positions `<= i`. Attention
    /// probabilities are dropped out when `dropout` is given.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        dropout: Option<(f64, &mut dyn RngCore)>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() {
            return Err(shape_err("causal_attention", tq, tk));
        }
        if tq.shape() != tv.shape() {
            return Err(shape_err("causal_attention", tq, tv));
        }
        let (n, d) = (tq.rows(), tq.cols());
        if heads == 0 || d % heads != 0 || seq == 0 || n % seq != 0 || tq.shape().len() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "causal_attention",
                reason: format!("shape {:?} incompatible with {heads} heads and sequence length {seq}", tq.shape()),
            });
        }
        let batch = n / seq;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut keep = match &dropout {
            Some((p, _)) if *p > 0.0 => Some(vec![0.0; probs.len()]),
            _ => None,
        };
        let mut rng = dropout;
        let mut out = vec![0.0; n * d];
        let mut scratch = vec![0.0; seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let base = (b * heads + h) * seq * seq;
                let p = &mut probs[base..base + seq * seq];
                gemm(
                    scale,
                    View::new(tq.data(), off, seq, dh, d),
                    View::new(tk.data(), off, seq, dh, d).t(),
                    0.0,
                    ViewMut::new(p, 0, seq, seq, seq),
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
                }
                let used: &[f64] = match (&mut keep, &mut rng) {
                    (Some(kp), Some((pd, r))) => {
                        let kslice = &mut kp[base..base + seq * seq];
                        let inv = 1.0 / (1.0 - *pd);
                        for i in 0..seq {
                            for j in 0..seq {
                                let idx = i * seq + j;
                                kslice[idx] = if j <= i && r.random::<f64>() >= *pd { inv } else { 0.0 };
                                scratch[idx] = p[idx] * kslice[idx];
                            }
                        }
                        &scratch
                    }
                    _ => p,
                };
                gemm(
                    1.0,
                    View::new(used, 0, seq, seq, seq),
                    View::new(tv.data(), off, seq, dh, d),
                    0.0,
                    ViewMut::new(&mut out, off, seq, dh, d),
                );
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(&[q, k, v]);
        self.push(t, Op::Attention { q, k, v, heads, seq, probs, keep }, rg)
    }

    /// Inverted dropout: kept values are scaled by `1 / (1 - p)`. Identity
    /// when not training or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut dyn RngCore, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::InvalidArgument { op: "dropout", reason: format!("p must be in [0, 1), got {p}") });
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let inv = 1.0 / (1.0 - p);
        let tx = self.value(x);
        let keep: Vec<f64> = (0..tx.numel()).map(|_| if rng.random::<f64>() >= p { inv } else { 0.0 }).collect();
        let data = tx.data().iter().zip(&keep).map(|(a, b)| a * b).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Dropout { x, keep }, rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, over positions where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, v) = (tl.rows(), tl.cols());
        if tl.shape().len() != 2 || targets.len() != rows || mask.len() != rows {
            return Err(AutodiffError::InvalidArgument {
                op: "cross_entropy",
                reason: format!("logits {:?}, {} targets, {} mask entries", tl.shape(), targets.len(), mask.len()),
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(AutodiffError::AllMasked);
        }
        let rg = self.rg(&[logits]);
        let mut probs = if rg { vec![0.0; rows * v] } else { Vec::new() };
        let mut total = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r] as usize;
            if t >= v {
                return Err(AutodiffError::IndexOutOfRange { op: "cross_entropy", index: t, bound: v });
            }
            let row = tl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            if rg {
                for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                    *p = (x - lse).exp();
                }
            }
        }
        let loss = Tensor::scalar(total / count as f64);
        self.push(loss, Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs, count }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.numel() == 0 {
            return Err(AutodiffError::InvalidArgument { op: "mean", reason: "empty tensor".into() });
        }
        let s = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Accumulates d`loss`/d`leaf` into every leaf that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(AutodiffError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = out.shape()[1];
                acc(*a, &mut |ga| {
                    // dA = dC · Bᵀ (or dC · B when B was used transposed)
                    let bv = if *trans_b { View::new(tb.data(), 0, n, k, k) } else { View::new(tb.data(), 0, k, n, n).t() };
                    gemm(1.0, View::new(g, 0, m, n, n), bv, 1.0, ViewMut::new(ga, 0, m, k, k));
                });
                acc(*b, &mut |gb| {
                    if *trans_b {
                        // dB = dCᵀ · A, shape n × k
                        gemm(1.0, View::new(g, 0, m, n, n).t(), View::new(ta.data(), 0, m, k, k), 1.0, ViewMut::new(gb, 0, n, k, k));
                    } else {
                        gemm(1.0, View::new(ta.data(), 0, m, k, k).t(), View::new(g, 0, m, n, n), 1.0, ViewMut::new(gb, 0, k, n, n));
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |ga| ga.iter_mut().zip(g).zip(tb.data()).for_each(|((x, y), z)| *x += y * z));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).zip(ta.data()).for_each(|((x, y), z)| *x += y * z));
            }
            Op::AddRow { a, row } => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*row, &mut |gr| {
                    let n = gr.len();
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::AddScalar(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Gelu(a) => {
                let ta = &nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for ((d, &gy), &x) in ga.iter_mut().zip(g).zip(ta.data()) {
                        let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *d += gy * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                });
            }
            Op::Relu(a) => {
                let ta = &nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for ((d, &gy), &x) in ga.iter_mut().zip(g).zip(ta.data()) {
                        if x > 0.0 {
                            *d += gy;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let tg = &nodes[gain.0].value;
                let n = tg.numel();
                acc(*x, &mut |gx| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gy = &g[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dxh = gy[j] * tg.data()[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                        }
                        for j in 0..n {
                            let dxh = gy[j] * tg.data()[j];
                            gx[r * n + j] += rs / n as f64 * (n as f64 * dxh - s1 - xh[j] * s2);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (gy, xh) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gy[j] * xh[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gy in g.chunks(n) {
                        add_into(gb, gy);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                acc(*a, &mut |ga| {
                    for ((gx, gy), y) in ga.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[j] += y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = out.cols();
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id as usize * d..(id as usize + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ScaleRows { x, weights } => {
                let n = out.cols();
                acc(*x, &mut |gx| {
                    for ((gr, gy), &w) in gx.chunks_mut(n).zip(g.chunks(n)).zip(weights) {
                        gr.iter_mut().zip(gy).for_each(|(a, b)| *a += w * b);
                    }
                });
            }
            Op::Cosine { u, v } => {
                let (tu, tv) = (&nodes[u.0].value, &nodes[v.0].value);
                let d = tu.cols();
                let rows = tu.rows();
                // Per row: dc/du = v/(|u||v|) - c u/|u|^2, symmetric for v.
                let stats: Vec<Option<(f64, f64, f64)>> = (0..rows)
                    .map(|r| {
                        let (nu, nv) = (norm(tu.row(r)), norm(tv.row(r)));
                        (nu >= COSINE_NORM_FLOOR && nv >= COSINE_NORM_FLOOR).then(|| (nu, nv, out.data()[r]))
                    })
                    .collect();
                acc(*u, &mut |gu| {
                    for r in 0..rows {
                        if let Some((nu, nv, c)) = stats[r] {
                            for j in 0..d {
                                gu[r * d + j] += g[r] * (tv.row(r)[j] / (nu * nv) - c * tu.row(r)[j] / (nu * nu));
                            }
                        }
                    }
                });
                acc(*v, &mut |gv| {
                    for r in 0..rows {
                        if let Some((nu, nv, c)) = stats[r] {
                            for j in 0..d {
                                gv[r * d + j] += g[r] * (tu.row(r)[j] / (nu * nv) - c * tv.row(r)[j] / (nv * nv));
                            }
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, seq, probs, keep } => {
                self.attention_backward(g, *q, *k, *v, *heads, *seq, probs, keep.as_deref(), grads);
            }
            Op::Dropout { x, keep } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).zip(keep).for_each(|((a, b), k)| *a += b * k));
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                let v = nodes[logits.0].value.cols();
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        if !mask[r] {
                            continue;
                        }
                        let row = &mut gl[r * v..(r + 1) * v];
                        for (x, p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *x += scale * p;
                        }
                        row[t as usize] -= scale;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.numel() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        probs: &[f64],
        keep: Option<&[f64]>,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let (n, d) = (tq.rows(), tq.cols());
        let batch = n / seq;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp = vec![0.0; seq * seq];
        let mut used = vec![0.0; seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let base = (b * heads + h) * seq * seq;
                let p = &probs[base..base + seq * seq];
                let kp = keep.map(|k| &k[base..base + seq * seq]);
                let p_used: &[f64] = match kp {
                    Some(kp) => {
                        used.iter_mut().zip(p).zip(kp).for_each(|((u, a), b)| *u = a * b);
                        &used
                    }
                    None => p,
                };
                // dV += P'ᵀ dO ; dP' = dO Vᵀ
                gemm(1.0, View::new(p_used, 0, seq, seq, seq).t(), View::new(g, off, seq, dh, d), 1.0, ViewMut::new(&mut dv, off, seq, dh, d));
                gemm(1.0, View::new(g, off, seq, dh, d), View::new(tv.data(), off, seq, dh, d).t(), 0.0, ViewMut::new(&mut dp, 0, seq, seq, seq));
                if let Some(kp) = kp {
                    dp.iter_mut().zip(kp).for_each(|(a, b)| *a *= b);
                }
                // dS = P ⊙ (dP - rowsum(dP ⊙ P)), then the 1/sqrt(dh) factor.
                for i in 0..seq {
                    let prow = &p[i * seq..(i + 1) * seq];
                    let drow = &mut dp[i * seq..(i + 1) * seq];
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..seq {
                        drow[j] = prow[j] * (drow[j] - dot) * scale;
                    }
                }
                gemm(1.0, View::new(&dp, 0, seq, seq, seq), View::new(tk.data(), off, seq, dh, d), 1.0, ViewMut::new(&mut dq, off, seq, dh, d));
                gemm(1.0, View::new(&dp, 0, seq, seq, seq).t(), View::new(tq.data(), off, seq, dh, d), 1.0, ViewMut::new(&mut dk, off, seq, dh, d));
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if !nodes[var.0].requires_grad {
                continue;
            }
            match &mut grads[var.0] {
                Some(acc) => add_into(acc, &delta),
                slot @ None => *slot = Some(delta),
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity with the zero-norm guard.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let (nu, nv) = (norm(u), norm(v));
    if nu < COSINE_NORM_FLOOR || nv < COSINE_NORM_FLOOR {
        return 0.0;
    }
    u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}
