use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{dot, matmul_at_into, matmul_bt_into, matmul_into};
use crate::{NumericError, Result, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How the rows of a `[batch * seq_len, d]` matrix are grouped into
/// sequences for [`Graph::attention`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    /// `true` for real tokens, `false` for padding; length `batch * seq_len`.
    pub key_mask: Vec<bool>,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    L2Norm(Var),
    ClampMin(Var, f64),
    DivLast(Var, Var),
    Mean { x: Var, axis: usize },
    Sum(Var),
    Reshape(Var),
    Gather { table: Var, rows: Vec<usize> },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout { x: Var, mask: Vec<f64> },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A recorded computation.
///
/// Nodes are appended in evaluation order, so the record is acyclic by
/// construction. A graph built with [`Graph::training`] applies dropout
/// using its own seeded stream; [`Graph::new`] builds an inference graph in
/// which dropout is the identity.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_names: HashMap<ParamId, String>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumericError {
    NumericError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> NumericError {
    NumericError::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_names: HashMap::new(),
            dropout_rng: None,
        }
    }

    /// A graph with dropout enabled, drawing masks from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// The node holding parameter `id`. Repeated calls return the same node
    /// so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        self.param_names.insert(id, store.name(id).to_string());
        v
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(invalid("transpose", format!("needs rank 2, got {:?}", ta.shape())));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let src = ta.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", Tensor::from_parts(vec![n, m], out), Op::Transpose(a))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())
    }

    /// Elementwise sum of equal shapes, or a row-broadcast when `b` is a
    /// vector matching the last axis of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let t = self.zip_same("add", a, b, |x, y| x + y)?;
            return self.push("add", t, Op::Add(a, b));
        }
        if tb.rank() == 1 && ta.rank() >= 1 && ta.cols() == tb.len() {
            let n = tb.len();
            let bias = tb.data();
            let data = ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bias[i % n])
                .collect();
            let t = Tensor::from_parts(ta.shape().to_vec(), data);
            return self.push("add", t, Op::AddRow(a, b));
        }
        Err(shape_err("add", ta, tb))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.map(a, |x| x * s);
        self.push("scale", t, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.map(a, |x| x + c);
        self.push("add_scalar", t, Op::AddScalar(a))
    }

    /// `x · w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add(h, b)
    }

    /// Concatenates along the last axis; all inputs share the leading axes.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let lead = self.value(*first).shape()[..self.value(*first).rank().saturating_sub(1)].to_vec();
        let rows = self.value(*first).rows();
        let mut width = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.shape()[..t.rank() - 1] != lead[..] {
                return Err(shape_err("concat", self.value(*first), t));
            }
            width += t.cols();
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        self.push("concat", Tensor::from_parts(shape, out), Op::Concat(parts.to_vec()))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, f64::tanh);
        self.push("tanh", t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, sigmoid);
        self.push("sigmoid", t, Op::Sigmoid(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), out);
        self.push("softmax", t, Op::Softmax(a))
    }

    /// Euclidean norm over the last axis; the result drops that axis.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() == 0 {
            return Err(invalid("l2_norm", "needs rank >= 1"));
        }
        let out: Vec<f64> = (0..ta.rows()).map(|r| dot(ta.row(r), ta.row(r)).sqrt()).collect();
        let shape = ta.shape()[..ta.rank() - 1].to_vec();
        self.push("l2_norm", Tensor::from_parts(shape, out), Op::L2Norm(a))
    }

    /// `max(a, floor)` elementwise; the gradient is zero where the floor is
    /// active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let t = self.map(a, |x| x.max(floor));
        self.push("clamp_min", t, Op::ClampMin(a, floor))
    }

    /// Divides every row of `a` (last axis) by the matching entry of `b`,
    /// whose shape is `a`'s shape without the last axis.
    pub fn div_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() == 0 || ta.shape()[..ta.rank() - 1] != *tb.shape() {
            return Err(shape_err("div_last", ta, tb));
        }
        let c = ta.cols();
        let denom = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x / denom[i / c])
            .collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("div_last", t, Op::DivLast(a, b))
    }

    /// Mean over `axis`; the result drops that axis.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() {
            return Err(invalid("mean", format!("axis {axis} out of range for {:?}", ta.shape())));
        }
        let (outer, len, inner) = split_axis(ta.shape(), axis);
        if len == 0 {
            return Err(invalid("mean", "empty axis"));
        }
        let src = ta.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        for v in &mut out {
            *v /= len as f64;
        }
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        self.push("mean", Tensor::from_parts(shape, out), Op::Mean { x: a, axis })
    }

    /// Sum of every entry, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(a))
    }

    /// Rows of `table: [V, d]` selected by `ids`, as `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather("embedding", table, ids)
    }

    /// Rows of a matrix selected by index (used for first-token pooling).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.gather("gather_rows", x, rows)
    }

    fn gather(&mut self, op: &'static str, table: Var, rows: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(invalid(op, format!("table must be rank 2, got {:?}", tt.shape())));
        }
        let (n, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(invalid(op, format!("row {r} out of range for {n} rows")));
            }
            out.extend_from_slice(tt.row(r));
        }
        let t = Tensor::from_parts(vec![rows.len(), d], out);
        self.push(
            op,
            t,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
        )
    }

    /// Layer normalization over the last axis with gain `gamma` and offset
    /// `beta`, both vectors of the last-axis width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.cols();
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = tx.row(r);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Inverted dropout with drop probability `p`. Identity on inference
    /// graphs or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", format!("probability {p} not in [0, 1)")));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("dropout", t, Op::Dropout { x, mask })
    }

    /// Mean cross-entropy of `logits: [B, C]` against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.shape()[0] != targets.len() || targets.is_empty() {
            return Err(invalid(
                "cross_entropy",
                format!("logits {:?} vs {} targets", tl.shape(), targets.len()),
            ));
        }
        let c = tl.cols();
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(invalid("cross_entropy", format!("target {t} out of range for {c} classes")));
            }
            let row = tl.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(&mut probs[r * c..(r + 1) * c]);
        }
        loss /= targets.len() as f64;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Scaled dot-product multi-head self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[batch * seq_len, d]` with `d` divisible by the
    /// head count. Padded keys receive exactly zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() || tq.rank() != 2 {
            return Err(shape_err("attention", tq, tk));
        }
        let (rows, d) = (tq.shape()[0], tq.shape()[1]);
        let AttentionLayout {
            batch,
            seq_len: t,
            heads,
            ref key_mask,
        } = layout;
        if batch * t != rows || key_mask.len() != rows || heads == 0 || d % heads != 0 {
            return Err(invalid(
                "attention",
                format!("layout batch={batch} seq_len={t} heads={heads} does not fit {rows}x{d}"),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * t * t];
        let mut out = vec![0.0; rows * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                for i in 0..t {
                    let qi = &qd[(b * t + i) * d + h * dh..(b * t + i) * d + (h + 1) * dh];
                    let prow = &mut p[i * t..(i + 1) * t];
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..t {
                        if key_mask[b * t + j] {
                            let kj = &kd[(b * t + j) * d + h * dh..(b * t + j) * d + (h + 1) * dh];
                            prow[j] = dot(qi, kj) * scale;
                            m = m.max(prow[j]);
                        }
                    }
                    let mut z = 0.0;
                    for j in 0..t {
                        if key_mask[b * t + j] {
                            prow[j] = (prow[j] - m).exp();
                            z += prow[j];
                        } else {
                            prow[j] = 0.0;
                        }
                    }
                    let o = &mut out[(b * t + i) * d + h * dh..(b * t + i) * d + (h + 1) * dh];
                    for j in 0..t {
                        if prow[j] == 0.0 {
                            continue;
                        }
                        prow[j] /= z;
                        let vj = &vd[(b * t + j) * d + h * dh..(b * t + j) * d + (h + 1) * dh];
                        for (ov, &vv) in o.iter_mut().zip(vj) {
                            *ov += prow[j] * vv;
                        }
                    }
                }
            }
        }
        let tensor = Tensor::from_parts(vec![rows, d], out);
        self.push(
            "attention",
            tensor,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
        )
    }

    /// Reverse-mode sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(NumericError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param => grads[i] = Some(g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    matmul_bt_into(&g, tb.data(), self.acc(&mut grads, *a), m, k, n);
                    matmul_at_into(ta.data(), &g, self.acc(&mut grads, *b), m, k, n);
                }
                Op::Transpose(a) => {
                    let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                    let ga = self.acc(&mut grads, *a);
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                }
                Op::Add(a, b) => {
                    axpy(self.acc(&mut grads, *a), &g, 1.0);
                    axpy(self.acc(&mut grads, *b), &g, 1.0);
                }
                Op::AddRow(a, b) => {
                    axpy(self.acc(&mut grads, *a), &g, 1.0);
                    let gb = self.acc(&mut grads, *b);
                    let n = gb.len();
                    for (idx, gv) in g.iter().enumerate() {
                        gb[idx % n] += gv;
                    }
                }
                Op::Sub(a, b) => {
                    axpy(self.acc(&mut grads, *a), &g, 1.0);
                    axpy(self.acc(&mut grads, *b), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (da, db) = (self.value(*a).data(), self.value(*b).data());
                    let ga = self.acc(&mut grads, *a);
                    for ((x, gv), y) in ga.iter_mut().zip(&g).zip(db) {
                        *x += gv * y;
                    }
                    let gb = self.acc(&mut grads, *b);
                    for ((x, gv), y) in gb.iter_mut().zip(&g).zip(da) {
                        *x += gv * y;
                    }
                }
                Op::Scale(a, s) => axpy(self.acc(&mut grads, *a), &g, *s),
                Op::AddScalar(a) | Op::Reshape(a) => axpy(self.acc(&mut grads, *a), &g, 1.0),
                Op::Concat(parts) => {
                    let width = node.value.cols();
                    let rows = node.value.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let gp = self.acc(&mut grads, p);
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * width + offset + c];
                            }
                        }
                        offset += w;
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let ga = self.acc(&mut grads, *a);
                    for ((x, gv), yv) in ga.iter_mut().zip(&g).zip(y) {
                        *x += gv * (1.0 - yv * yv);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let ga = self.acc(&mut grads, *a);
                    for ((x, gv), yv) in ga.iter_mut().zip(&g).zip(y) {
                        *x += gv * yv * (1.0 - yv);
                    }
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let ga = self.acc(&mut grads, *a);
                    for ((gr, yr), xr) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let s = dot(gr, yr);
                        for j in 0..c {
                            xr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
                Op::L2Norm(a) => {
                    let ta = self.value(*a);
                    let c = ta.cols();
                    let y = node.value.data();
                    let ga = self.acc(&mut grads, *a);
                    for r in 0..y.len() {
                        if y[r] > 0.0 {
                            let f = g[r] / y[r];
                            for j in 0..c {
                                ga[r * c + j] += f * ta.data()[r * c + j];
                            }
                        }
                    }
                }
                Op::ClampMin(a, floor) => {
                    let xa = self.value(*a).data();
                    let ga = self.acc(&mut grads, *a);
                    for ((x, gv), v) in ga.iter_mut().zip(&g).zip(xa) {
                        if v > floor {
                            *x += gv;
                        }
                    }
                }
                Op::DivLast(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let c = ta.cols();
                    let (da, db) = (ta.data(), tb.data());
                    let ga = self.acc(&mut grads, *a);
                    for (idx, x) in ga.iter_mut().enumerate() {
                        *x += g[idx] / db[idx / c];
                    }
                    let gb = self.acc(&mut grads, *b);
                    for (r, x) in gb.iter_mut().enumerate() {
                        let s: f64 = (0..c).map(|j| g[r * c + j] * da[r * c + j]).sum();
                        *x -= s / (db[r] * db[r]);
                    }
                }
                Op::Mean { x, axis } => {
                    let (outer, len, inner) = split_axis(self.value(*x).shape(), *axis);
                    let gx = self.acc(&mut grads, *x);
                    let inv = 1.0 / len as f64;
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                gx[(o * len + l) * inner + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    let ga = self.acc(&mut grads, *a);
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
                Op::Gather { table, rows } => {
                    let d = node.value.cols();
                    let gt = self.acc(&mut grads, *table);
                    for (r, &src) in rows.iter().enumerate() {
                        axpy(&mut gt[src * d..(src + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let c = node.value.cols();
                    let gam = self.value(*gamma).data().to_vec();
                    {
                        let gg = self.acc(&mut grads, *gamma);
                        for (idx, gv) in g.iter().enumerate() {
                            gg[idx % c] += gv * xhat[idx];
                        }
                    }
                    {
                        let gb = self.acc(&mut grads, *beta);
                        for (idx, gv) in g.iter().enumerate() {
                            gb[idx % c] += gv;
                        }
                    }
                    let gx = self.acc(&mut grads, *x);
                    let n = c as f64;
                    let mut dxhat = vec![0.0; c];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let base = r * c;
                        for j in 0..c {
                            dxhat[j] = g[base + j] * gam[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2 = dot(&dxhat, &xhat[base..base + c]);
                        for j in 0..c {
                            gx[base + j] += is / n * (n * dxhat[j] - s1 - xhat[base + j] * s2);
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    let gx = self.acc(&mut grads, *x);
                    for ((v, gv), m) in gx.iter_mut().zip(&g).zip(mask) {
                        *v += gv * m;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let c = self.value(*logits).cols();
                    let f = g[0] / targets.len() as f64;
                    let gl = self.acc(&mut grads, *logits);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += f * (probs[r * c + j] - onehot);
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    probs,
                } => self.attention_backward(&mut grads, &g, (*q, *k, *v), layout, probs),
            }
        }

        let mut out = Gradients::default();
        for (&id, &var) in &self.params {
            if let Some(g) = grads[var.0].take() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NumericError::NonFiniteGradient(self.param_names[&id].clone()));
                }
                if out.grads.len() <= id.0 {
                    out.grads.resize(id.0 + 1, None);
                }
                let shape = self.value(var).shape().to_vec();
                out.grads[id.0] = Some(Tensor::from_parts(shape, g));
            }
        }
        Ok(out)
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut [f64] {
        let n = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn attention_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        (q, k, v): (Var, Var, Var),
        layout: &AttentionLayout,
        probs: &[f64],
    ) {
        let d = self.value(q).cols();
        let (batch, t, heads) = (layout.batch, layout.seq_len, layout.heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut ds = vec![0.0; t];
        let span = |b: usize, i: usize, h: usize| (b * t + i) * d + h * dh..(b * t + i) * d + (h + 1) * dh;
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                for i in 0..t {
                    let prow = &p[i * t..(i + 1) * t];
                    let go = &g[span(b, i, h)];
                    let mut s = 0.0;
                    for j in 0..t {
                        if prow[j] == 0.0 {
                            ds[j] = 0.0;
                            continue;
                        }
                        let vj = &vd[span(b, j, h)];
                        ds[j] = dot(go, vj);
                        s += prow[j] * ds[j];
                        axpy(&mut gv[span(b, j, h)], go, prow[j]);
                    }
                    for j in 0..t {
                        if prow[j] == 0.0 {
                            continue;
                        }
                        let dsj = prow[j] * (ds[j] - s) * scale;
                        axpy(&mut gq[span(b, i, h)], &kd[span(b, j, h)], dsj);
                        axpy(&mut gk[span(b, j, h)], &qd[span(b, i, h)], dsj);
                    }
                }
            }
        }
        axpy(self.acc(grads, q), &gq, 1.0);
        axpy(self.acc(grads, k), &gk, 1.0);
        axpy(self.acc(grads, v), &gv, 1.0);
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0; 3]).unwrap());
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn l2_norm_of_three_four_is_five() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let n = g.l2_norm(x).unwrap();
        assert_eq!(g.value(n).item(), Some(5.0));
        assert_eq!(g.value(n).rank(), 0);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln3() {
        for target in 0..3 {
            let mut g = Graph::new();
            let x = g.constant(Tensor::matrix(1, 3, vec![0.7; 3]).unwrap());
            let l = g.cross_entropy(x, &[target]).unwrap();
            assert!(close(g.value(l).item().unwrap(), 3f64.ln(), 1e-15));
        }
    }

    #[test]
    fn shape_errors_name_the_operation() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(NumericError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = g.constant(Tensor::zeros(&[4]));
        assert!(matches!(g.sub(a, c), Err(NumericError::ShapeMismatch { op: "sub", .. })));
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
        let z = g.constant(Tensor::scalar(0.0));
        let z = g.reshape(z, &[]).unwrap();
        assert_eq!(g.div_last(a, z), Err(NumericError::NonFinite { op: "div_last" }));
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut store = ParamStore::new();
        let p = store.insert("p", Tensor::vector(vec![0.3, -1.2, 4.0]).unwrap(), true).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, p);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let vals = vec![0.5, -2.0, 3.25, 1e-3];
        let mut store = ParamStore::new();
        let p = store.insert("p", Tensor::vector(vals.clone()).unwrap(), true).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, p);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let l = g.scale(s, 0.5).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &vals[..]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2]));
        assert_eq!(g.backward(x).unwrap_err(), NumericError::NonScalarLoss(vec![2]));
    }

    #[test]
    fn dropout_is_identity_at_inference_and_seeded_in_training() {
        let t = Tensor::full(&[4, 8], 1.0);
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let y = g.dropout(x, 0.5).unwrap();
        assert_eq!(x, y);

        let run = |seed| {
            let mut g = Graph::training(seed);
            let x = g.constant(t.clone());
            let y = g.dropout(x, 0.5).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
        assert!(run(7).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn attention_ignores_padded_keys() {
        // One sequence of length 3 whose last position is padding: changing
        // the padded key/value must not move the real rows.
        let layout = AttentionLayout {
            batch: 1,
            seq_len: 3,
            heads: 2,
            key_mask: vec![true, true, false],
        };
        let base: Vec<f64> = (0..12).map(|v| (v as f64 * 0.37).sin()).collect();
        let run = |pad: f64| {
            let mut data = base.clone();
            for v in &mut data[8..12] {
                *v = pad;
            }
            let mut g = Graph::new();
            let x = g.constant(Tensor::matrix(3, 4, data).unwrap());
            let o = g.attention(x, x, x, layout.clone()).unwrap();
            g.value(o).data()[..8].to_vec()
        };
        assert_eq!(run(0.0), run(5.0));
    }

    #[test]
    fn mean_over_middle_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap());
        let m = g.mean(x, 1).unwrap();
        assert_eq!(g.value(m).shape(), &[2, 2]);
        assert_eq!(g.value(m).data(), &[1.0, 2.0, 5.0, 6.0]);
    }
}
