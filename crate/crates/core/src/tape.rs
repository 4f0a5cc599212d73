//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the backward pass. [`Tape::backward`] replays the nodes in reverse order and
//! produces gradients for every node that (transitively) depends on a leaf
//! created with `requires_grad = true`. Nodes that depend only on constants are
//! never differentiated, which is how frozen base weights stay gradient-free.

use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::rope::{check_head_dim, rope_table, rotate_rows, Position2D};
use crate::tensor::{
    dot, matmul_nt_into, matmul_tn_into, softmax_row_into, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    RowScale(Var, Arc<[f64]>),
    LayerNorm {
        x: Var,
        affine: Option<(Var, Var)>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Silu(Var),
    Gelu(Var),
    Softmax(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    MeanRows(Var),
    Mean(Var),
    Mse {
        pred: Var,
        target: Arc<Tensor>,
    },
    Rope {
        x: Var,
        d_head: usize,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Reshape(..) => "reshape",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::RowScale(..) => "row_scale",
            Op::LayerNorm { .. } => "layernorm",
            Op::Silu(..) => "silu",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::Mean(..) => "mean",
            Op::Mse { .. } => "mse",
            Op::Rope { .. } => "rope",
            Op::Attention { .. } => "attention",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Borrowed gradient data, if `v` received any gradient.
    pub fn data(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Attention probabilities `[heads, n, n]` saved by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, heads, .. } => {
                let n = self.value(v).rows();
                Tensor::new(vec![*heads, n, n], probs.clone()).ok()
            }
            _ => None,
        }
    }

    /// A leaf whose `requires_grad` flag comes from the tensor.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push_leaf(Arc::new(t), rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(Arc::new(t), false)
    }

    /// Shares an existing tensor without copying it.
    pub fn shared(&mut self, t: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push_leaf(t, requires_grad)
    }

    fn push_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).matrix_dims()
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    fn row_vec_width(&self, x: Var, v: Var) -> Result<usize> {
        let (_, d) = self.dims(x)?;
        let vt = self.value(v);
        let ok = match vt.shape() {
            [n] => *n == d,
            [1, n] => *n == d,
            _ => false,
        };
        if !ok {
            return dim_err(format!(
                "row vector {:?} does not match width {d}",
                vt.shape()
            ));
        }
        Ok(d)
    }

    /// `x[n,d] + v[d]` applied to every row.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let d = self.row_vec_width(x, v)?;
        let vd = self.value(v).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            row.iter_mut().zip(vd).for_each(|(o, b)| *o += b);
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(out, Op::AddRow(x, v), &[x, v])
    }

    /// `x[n,d] * v[d]` applied to every row.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let d = self.row_vec_width(x, v)?;
        let vd = self.value(v).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            row.iter_mut().zip(vd).for_each(|(o, s)| *o *= s);
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(out, Op::MulRow(x, v), &[x, v])
    }

    /// Scales row `t` of `x` by the constant `gates[t]`.
    pub fn row_scale(&mut self, x: Var, gates: Arc<[f64]>) -> Result<Var> {
        let (n, d) = self.dims(x)?;
        if gates.len() != n {
            return dim_err(format!("{} gates for {n} rows", gates.len()));
        }
        let mut out = self.value(x).data().to_vec();
        for (row, g) in out.chunks_mut(d).zip(gates.iter()) {
            row.iter_mut().for_each(|o| *o *= g);
        }
        let out = Tensor::new(vec![n, d], out)?;
        self.push(out, Op::RowScale(x, gates), &[x])
    }

    /// Per-row layer normalization with optional affine `scale[d]`, `shift[d]`.
    pub fn layernorm(&mut self, x: Var, affine: Option<(Var, Var)>, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Domain(format!("layernorm eps must be positive, got {eps}")));
        }
        let xt = self.value(x);
        let d = xt.cols();
        if let Some((s, b)) = affine {
            self.row_vec_width(x, s)?;
            self.row_vec_width(x, b)?;
        }
        let xt = self.value(x);
        let rows = xt.rows();
        let mut xhat = vec![0.0; xt.numel()];
        let mut rstd = vec![0.0; rows];
        for (r, (row, out)) in xt.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some((s, b)) = affine {
            let sd = self.value(s).data();
            let bd = self.value(b).data();
            for row in out.chunks_mut(d) {
                for ((o, sv), bv) in row.iter_mut().zip(sd).zip(bd) {
                    *o = *o * sv + bv;
                }
            }
        }
        let out = Tensor::new(xt.shape().to_vec(), out)?;
        let mut inputs = vec![x];
        if let Some((s, b)) = affine {
            inputs.extend([s, b]);
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                affine,
                xhat,
                rstd,
            },
            &inputs,
        )
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v / (1.0 + (-v).exp()));
        self.push(out, Op::Silu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| 0.5 * v * (1.0 + gelu_inner(v).tanh()));
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Softmax over the last dimension; all-`-inf` rows become zero rows.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let data = crate::tensor::softmax_rows(xt.data(), xt.cols());
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        self.push(out, Op::SliceRows { x, start }, &[x])
    }

    /// Splits `x` into consecutive row blocks of the given lengths.
    pub fn split_rows(&mut self, x: Var, lengths: &[usize]) -> Result<Vec<Var>> {
        let (n, _) = self.dims(x)?;
        if lengths.iter().sum::<usize>() != n {
            return dim_err(format!("split lengths {lengths:?} do not cover {n} rows"));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(lengths.len());
        for &len in lengths {
            parts.push(self.slice_rows(x, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    /// Row lookup `table[ids[t]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims(table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return dim_err(format!("gather index {bad} out of range for {rows} rows"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Column means of `x[n,d]`, shaped `[1,d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims(x)?;
        let mut out = vec![0.0; d];
        for row in self.value(x).data().chunks(d) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let out = Tensor::new(vec![1, d], out)?;
        self.push(out, Op::MeanRows(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let out = Tensor::scalar(xt.sum() / xt.numel() as f64);
        self.push(out, Op::Mean(x), &[x])
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Arc<Tensor>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return dim_err(format!(
                "mse shapes differ: {:?} vs {:?}",
                p.shape(),
                target.shape()
            ));
        }
        let s: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let out = Tensor::scalar(s / p.numel() as f64);
        self.push(out, Op::Mse { pred, target }, &[pred])
    }

    /// Rotary embedding on `x[n, heads * d_head]`, one position per row.
    pub fn rope(&mut self, x: Var, positions: &[Position2D], d_head: usize, base: f64) -> Result<Var> {
        check_head_dim(d_head, base)?;
        let (n, d) = self.dims(x)?;
        if d % d_head != 0 {
            return dim_err(format!("width {d} is not a multiple of head dim {d_head}"));
        }
        if positions.len() != n {
            return dim_err(format!("{} positions for {n} rows", positions.len()));
        }
        let table = rope_table(positions, d_head, base);
        let mut out = self.value(x).data().to_vec();
        rotate_rows(&mut out, d, d_head, &table, 1.0);
        let out = Tensor::new(vec![n, d], out)?;
        self.push(
            out,
            Op::Rope {
                x,
                d_head,
                cos: table.cos,
                sin: table.sin,
            },
            &[x],
        )
    }

    /// Multi-head scaled dot-product attention over `q, k, v[n, d]` with an
    /// optional additive bias `[n, n]` shared by all heads. The bias may hold
    /// `-inf` entries; rows that end up fully masked produce zero output.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        bias: Option<&Tensor>,
    ) -> Result<Var> {
        let (n, d) = self.dims(q)?;
        if self.dims(k)? != (n, d) || self.dims(v)? != (n, d) {
            return dim_err("attention q, k, v shapes differ");
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        if let Some(b) = bias {
            if b.shape() != [n, n] {
                return dim_err(format!("bias {:?} does not match {n} tokens", b.shape()));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; heads * n * n];
        let mut out = vec![0.0; n * d];
        let mut logits = vec![0.0; n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &qd[i * d + off..i * d + off + dh];
                for (j, l) in logits.iter_mut().enumerate() {
                    *l = scale * dot(qi, &kd[j * d + off..j * d + off + dh]);
                }
                if let Some(b) = bias {
                    logits.iter_mut().zip(b.row(i)).for_each(|(l, bv)| *l += bv);
                }
                let prow = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                softmax_row_into(&logits, prow);
                let orow = &mut out[i * d + off..i * d + off + dh];
                for (j, &p) in prow.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let vj = &vd[j * d + off..j * d + off + dh];
                    orow.iter_mut().zip(vj).for_each(|(o, x)| *o += p * x);
                }
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return dim_err("backward requires a scalar loss");
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Grads { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a).unwrap();
                let n = out.cols();
                if self.requires_grad(*a) {
                    let ga = self.grad_buf(*a, grads);
                    matmul_nt_into(g, self.value(*b).data(), ga, m, k, n);
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data();
                    let gb = self.grad_buf(*b, grads);
                    matmul_tn_into(av, g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, grads, |buf| add_into(buf, g));
                self.accumulate(*b, grads, |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, grads, |buf| add_into(buf, g));
                self.accumulate(*b, grads, |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, gv)| *o -= gv)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(*a, grads, |buf| {
                    for ((o, gv), y) in buf.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                });
                self.accumulate(*b, grads, |buf| {
                    for ((o, gv), x) in buf.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(*a, grads, |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, gv)| *o += c * gv)
                });
            }
            Op::Reshape(x) => {
                self.accumulate(*x, grads, |buf| add_into(buf, g));
            }
            Op::AddRow(x, v) => {
                let d = out.cols();
                self.accumulate(*x, grads, |buf| add_into(buf, g));
                self.accumulate(*v, grads, |buf| {
                    for row in g.chunks(d) {
                        add_into(buf, row);
                    }
                });
            }
            Op::MulRow(x, v) => {
                let d = out.cols();
                let (xv, vv) = (self.value(*x).data(), self.value(*v).data());
                self.accumulate(*x, grads, |buf| {
                    for (brow, grow) in buf.chunks_mut(d).zip(g.chunks(d)) {
                        for ((o, gv), s) in brow.iter_mut().zip(grow).zip(vv) {
                            *o += gv * s;
                        }
                    }
                });
                self.accumulate(*v, grads, |buf| {
                    for (grow, xrow) in g.chunks(d).zip(xv.chunks(d)) {
                        for ((o, gv), xval) in buf.iter_mut().zip(grow).zip(xrow) {
                            *o += gv * xval;
                        }
                    }
                });
            }
            Op::RowScale(x, gates) => {
                let d = out.cols();
                self.accumulate(*x, grads, |buf| {
                    for ((brow, grow), gate) in buf.chunks_mut(d).zip(g.chunks(d)).zip(gates.iter()) {
                        brow.iter_mut().zip(grow).for_each(|(o, gv)| *o += gate * gv);
                    }
                });
            }
            Op::LayerNorm {
                x,
                affine,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                // Gradient w.r.t. the normalized values.
                let mut gx = g.to_vec();
                if let Some((s, b)) = affine {
                    let sv = self.value(*s).data();
                    self.accumulate(*s, grads, |buf| {
                        for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                            for ((o, gv), xh) in buf.iter_mut().zip(grow).zip(xrow) {
                                *o += gv * xh;
                            }
                        }
                    });
                    self.accumulate(*b, grads, |buf| {
                        for grow in g.chunks(d) {
                            add_into(buf, grow);
                        }
                    });
                    for row in gx.chunks_mut(d) {
                        row.iter_mut().zip(sv).for_each(|(o, s)| *o *= s);
                    }
                }
                self.accumulate(*x, grads, |buf| {
                    let inv_d = 1.0 / d as f64;
                    for (r, ((brow, grow), xrow)) in buf
                        .chunks_mut(d)
                        .zip(gx.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let mean_g = grow.iter().sum::<f64>() * inv_d;
                        let mean_gx = dot(grow, xrow) * inv_d;
                        for ((o, gv), xh) in brow.iter_mut().zip(grow).zip(xrow) {
                            *o += rstd[r] * (gv - mean_g - xh * mean_gx);
                        }
                    }
                });
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(*x, grads, |buf| {
                    for ((o, gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                        let s = 1.0 / (1.0 + (-v).exp());
                        *o += gv * s * (1.0 + v * (1.0 - s));
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(*x, grads, |buf| {
                    for ((o, gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                        let t = gelu_inner(v).tanh();
                        let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        let dy = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner;
                        *o += gv * dy;
                    }
                });
            }
            Op::Softmax(x) => {
                let n = out.cols();
                let y = out.data();
                self.accumulate(*x, grads, |buf| {
                    for ((brow, grow), yrow) in buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let s = dot(grow, yrow);
                        for ((o, gv), yv) in brow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - s);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    let slice = &g[offset..offset + len];
                    self.accumulate(*p, grads, |buf| add_into(buf, slice));
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let d = out.cols();
                let off = start * d;
                self.accumulate(*x, grads, |buf| add_into(&mut buf[off..off + g.len()], g));
            }
            Op::GatherRows { table, ids } => {
                let d = out.cols();
                self.accumulate(*table, grads, |buf| {
                    for (grow, &i) in g.chunks(d).zip(ids) {
                        add_into(&mut buf[i * d..(i + 1) * d], grow);
                    }
                });
            }
            Op::MeanRows(x) => {
                let (n, d) = self.dims(*x).unwrap();
                self.accumulate(*x, grads, |buf| {
                    for brow in buf.chunks_mut(d) {
                        for (o, gv) in brow.iter_mut().zip(g) {
                            *o += gv / n as f64;
                        }
                    }
                });
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                self.accumulate(*x, grads, |buf| buf.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let c = 2.0 * g[0] / p.len() as f64;
                self.accumulate(*pred, grads, |buf| {
                    for ((o, a), b) in buf.iter_mut().zip(p).zip(target.data()) {
                        *o += c * (a - b);
                    }
                });
            }
            Op::Rope { x, d_head, cos, sin } => {
                let d = out.cols();
                let table = crate::rope::RopeTable {
                    cos: cos.clone(),
                    sin: sin.clone(),
                    half: d_head / 2,
                };
                let mut gx = g.to_vec();
                rotate_rows(&mut gx, d, *d_head, &table, -1.0);
                self.accumulate(*x, grads, |buf| add_into(buf, &gx));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (n, d) = self.dims(q).unwrap();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut gq = vec![0.0; n * d];
        let mut gk = vec![0.0; n * d];
        let mut gv = vec![0.0; n * d];
        let mut dp = vec![0.0; n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let prow = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                let gi = &g[i * d + off..i * d + off + dh];
                for j in 0..n {
                    let vj = &vd[j * d + off..j * d + off + dh];
                    dp[j] = dot(gi, vj);
                    let p = prow[j];
                    if p != 0.0 {
                        let gvj = &mut gv[j * d + off..j * d + off + dh];
                        gvj.iter_mut().zip(gi).for_each(|(o, x)| *o += p * x);
                    }
                }
                let s = dot(prow, &dp);
                let qi = &qd[i * d + off..i * d + off + dh];
                for j in 0..n {
                    let ds = prow[j] * (dp[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let gqi = &mut gq[i * d + off..i * d + off + dh];
                    gqi.iter_mut().zip(kj).for_each(|(o, x)| *o += ds * x);
                    let gkj = &mut gk[j * d + off..j * d + off + dh];
                    gkj.iter_mut().zip(qi).for_each(|(o, x)| *o += ds * x);
                }
            }
        }
        self.accumulate(q, grads, |buf| add_into(buf, &gq));
        self.accumulate(k, grads, |buf| add_into(buf, &gk));
        self.accumulate(v, grads, |buf| add_into(buf, &gv));
    }

    fn grad_buf<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> &'g mut [f64] {
        let len = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn accumulate(&self, v: Var, grads: &mut [Option<Vec<f64>>], f: impl FnOnce(&mut [f64])) {
        if self.requires_grad(v) {
            f(self.grad_buf(v, grads));
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_inner(v: f64) -> f64 {
    GELU_C * (v + 0.044715 * v * v * v)
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv);
}
