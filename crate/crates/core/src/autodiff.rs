//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value and the inputs it needs
//! for the backward pass. [`Tape::backward`] walks the nodes once in reverse,
//! accumulating gradients additively where a value fans out, and then clears
//! the tape. Handles ([`Var`]) from a consumed tape are rejected.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    generation: u64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Exp(usize),
    Tanh(usize),
    Gelu(usize),
    Clamp(usize, f64, f64),
    Minimum(usize, usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    LogSoftmax(usize),
    PickPerRow {
        x: usize,
        idx: Vec<usize>,
    },
    SelectRows {
        x: usize,
        rows: Vec<usize>,
    },
    CausalAttention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    generation: u64,
}

/// Gradients of a scalar loss with respect to the tracked leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    generation: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Tape::param`]. `None` if the leaf
    /// did not influence the loss or is not tracked.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.generation != self.generation {
            return None;
        }
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient or zeros shaped like `like` when the leaf is unreachable.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| like.same_shape_zeros())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        if var.generation != self.generation {
            return None;
        }
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

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

    fn check(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation || v.id >= self.nodes.len() {
            return Err(Error::TapeConsumed);
        }
        Ok(v.id)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Result<Var> {
        let ia = self.check(a)?;
        let ng = self.nodes[ia].needs_grad;
        Ok(self.push(value, op, ng))
    }

    /// A leaf tracked for gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf honoring the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = value.requires_grad;
        self.push(value, Op::Leaf, rg)
    }

    /// Copy of `a` cut off from the gradient flow.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a)?.clone();
        Ok(self.constant(v))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.val(ia).shape(), self.val(ib).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        tensor::matmul_acc(self.val(ia).data(), self.val(ib).data(), &mut out, n, k, m);
        let ng = self.nodes[ia].needs_grad || self.nodes[ib].needs_grad;
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(ia, ib), ng))
    }

    fn same_shape(&self, op: &'static str, ia: usize, ib: usize) -> Result<()> {
        if self.val(ia).shape() != self.val(ib).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.val(ia).shape(), self.val(ib).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(op_name, ia, ib)?;
        let data: Vec<f64> = self
            .val(ia)
            .data()
            .iter()
            .zip(self.val(ib).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.val(ia).shape().to_vec(), data)?;
        let ng = self.nodes[ia].needs_grad || self.nodes[ib].needs_grad;
        Ok(self.push(out, op(ia, ib), ng))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: impl Fn(usize) -> Op) -> Result<Var> {
        let ia = self.check(a)?;
        let src = self.val(ia);
        let out = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&x| f(x)).collect(),
        )?;
        self.unary(a, out, op(ia))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("minimum", a, b, f64::min, Op::Minimum)
    }

    /// `a[n,m] + bias[m]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(bias)?);
        let (_, cols) = self.val(ia).rows_cols();
        if self.val(ib).numel() != cols {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.val(ia).shape(), self.val(ib).shape()),
            ));
        }
        let b = self.val(ib).data();
        let mut data = self.val(ia).data().to_vec();
        for row in data.chunks_mut(cols) {
            for (x, y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        let out = Tensor::new(self.val(ia).shape().to_vec(), data)?;
        let ng = self.nodes[ia].needs_grad || self.nodes[ib].needs_grad;
        Ok(self.push(out, Op::AddBias(ia, ib), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, |x| c * x, |i| Op::Scale(i, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, f64::exp, Op::Exp)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, f64::tanh, Op::Tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Op::Gelu,
        )
    }

    /// Gradient is zero wherever the input sits outside `(lo, hi)`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        self.map(a, |x| x.clamp(lo, hi), |i| Op::Clamp(i, lo, hi))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Row-wise layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (rows, cols) = self.val(ix).rows_cols();
        if self.val(ig).numel() != cols || self.val(ib).numel() != cols {
            return Err(Error::shape(
                "layer_norm",
                format!("{:?}", self.val(ix).shape()),
            ));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        let (g, b) = (self.val(ig).data(), self.val(ib).data());
        for r in 0..rows {
            let row = self.val(ix).row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::new(self.val(ix).shape().to_vec(), out)?;
        let ng = [ix, ig, ib].iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Gather rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let t = self.val(it);
        let (rows, cols) = t.rows_cols();
        if ids.is_empty() {
            return Err(Error::shape("embedding", "no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::UnknownTokenId { id, size: rows });
            }
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), cols], out)?;
        self.unary(
            table,
            out,
            Op::Embedding {
                table: it,
                ids: ids.to_vec(),
            },
        )
    }

    /// Row-wise log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let src = self.val(ia);
        let (_, cols) = src.rows_cols();
        let mut data = Vec::with_capacity(src.numel());
        for row in src.data().chunks(cols) {
            data.extend(tensor::log_softmax(row)?);
        }
        let out = Tensor::new(src.shape().to_vec(), data)?;
        self.unary(a, out, Op::LogSoftmax(ia))
    }

    /// `out[i] = x[i, idx[i]]` for a `[n, m]` input.
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let src = self.val(ix);
        let (rows, cols) = src.rows_cols();
        if idx.len() != rows {
            return Err(Error::shape(
                "pick_per_row",
                format!("{} indices for {rows} rows", idx.len()),
            ));
        }
        let mut data = Vec::with_capacity(rows);
        for (r, &c) in idx.iter().enumerate() {
            if c >= cols {
                return Err(Error::shape("pick_per_row", format!("index {c} >= {cols}")));
            }
            data.push(src.data()[r * cols + c]);
        }
        let out = Tensor::new(vec![rows], data)?;
        self.unary(
            x,
            out,
            Op::PickPerRow {
                x: ix,
                idx: idx.to_vec(),
            },
        )
    }

    /// Rows of a matrix, in the given order (repeats allowed).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let src = self.val(ix);
        let (n, cols) = src.rows_cols();
        if rows.is_empty() {
            return Err(Error::shape("select_rows", "no rows"));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::shape("select_rows", format!("row {r} >= {n}")));
            }
            data.extend_from_slice(src.row(r));
        }
        let out = Tensor::new(vec![rows.len(), cols], data)?;
        self.unary(
            x,
            out,
            Op::SelectRows {
                x: ix,
                rows: rows.to_vec(),
            },
        )
    }

    /// Multi-head scaled dot-product attention with a causal mask.
    /// `q`, `k`, `v` are `[T, d]` with heads laid out as contiguous column blocks.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (iq, ik, iv) = (self.check(q)?, self.check(k)?, self.check(v)?);
        let shape = self.val(iq).shape().to_vec();
        if shape.len() != 2 || self.val(ik).shape() != shape || self.val(iv).shape() != shape {
            return Err(Error::shape("causal_attention", format!("{shape:?}")));
        }
        let (t, d) = (shape[0], shape[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "causal_attention",
                format!("d={d} not divisible by heads={heads}"),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.val(iq).data(),
            self.val(ik).data(),
            self.val(iv).data(),
        );
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        let mut scores = vec![0.0; t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let qi = &qd[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    scores[j] = tensor::dot(qi, &kd[j * d + off..j * d + off + dh]) * scale;
                }
                tensor::softmax_in_place(&mut scores[..=i]);
                let prow = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                prow[..=i].copy_from_slice(&scores[..=i]);
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let p = prow[j];
                    for (o, &vv) in orow.iter_mut().zip(&vd[j * d + off..j * d + off + dh]) {
                        *o += p * vv;
                    }
                }
            }
        }
        let out = Tensor::new(vec![t, d], out)?;
        let ng = [iq, ik, iv].iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push(
            out,
            Op::CausalAttention {
                q: iq,
                k: ik,
                v: iv,
                heads,
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.val(ia).data().iter().sum();
        self.unary(a, Tensor::scalar(s), Op::Sum(ia))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.unary(a, Tensor::scalar(s), Op::Mean(ia))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lp = self.log_softmax(logits)?;
        let picked = self.pick_per_row(lp, targets)?;
        let m = self.mean(picked)?;
        self.neg(m)
    }

    /// Back-propagate from a scalar `loss`, then clear the tape.
    ///
    /// Calling again with handles from the consumed tape returns
    /// [`Error::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        if !self.val(il).is_scalar() {
            return Err(Error::NonScalarLoss(self.val(il).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(Tensor::ones(self.val(il).shape()));
        for i in (0..=il).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        // Only tracked leaves keep their gradient.
        for (i, g) in grads.iter_mut().enumerate() {
            if !(matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].needs_grad) {
                *g = None;
            }
        }
        let generation = self.generation;
        self.nodes.clear();
        self.generation += 1;
        Ok(Gradients { generation, grads })
    }

    /// Drop nodes recorded after the first `len`. Handles to dropped nodes
    /// must not be used again.
    pub(crate) fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Drop all recorded nodes without a backward pass.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.generation += 1;
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let needs = |j: usize| self.nodes[j].needs_grad;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.val(*a).shape(), self.val(*b).shape());
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    let mut ga = vec![0.0; n * k];
                    tensor::matmul_a_bt_acc(gd, self.val(*b).data(), &mut ga, n, k, m);
                    accumulate(grads, *a, sa, ga);
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * m];
                    tensor::matmul_at_b_acc(self.val(*a).data(), gd, &mut gb, n, k, m);
                    accumulate(grads, *b, sb, gb);
                }
            }
            Op::Add(a, b) => {
                for &j in [a, b] {
                    if needs(j) {
                        accumulate(grads, j, g.shape(), gd.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.shape(), gd.to_vec());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.shape(), gd.iter().map(|v| -v).collect());
                }
            }
            Op::AddBias(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.shape(), gd.to_vec());
                }
                if needs(*b) {
                    let cols = self.val(*b).numel();
                    let mut gb = vec![0.0; cols];
                    for row in gd.chunks(cols) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *b, self.val(*b).shape(), gb);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                if needs(*a) {
                    let ga = gd.iter().zip(vb).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, g.shape(), ga);
                }
                if needs(*b) {
                    let gb = gd.iter().zip(va).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, g.shape(), gb);
                }
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, g.shape(), gd.iter().map(|v| v * c).collect());
            }
            Op::Exp(a) => {
                let out = node.value.data();
                let ga = gd.iter().zip(out).map(|(g, y)| g * y).collect();
                accumulate(grads, *a, g.shape(), ga);
            }
            Op::Tanh(a) => {
                let out = node.value.data();
                let ga = gd.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(grads, *a, g.shape(), ga);
            }
            Op::Gelu(a) => {
                let x = self.val(*a).data();
                let ga = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                accumulate(grads, *a, g.shape(), ga);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.val(*a).data();
                let ga = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > *lo && x < *hi { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, g.shape(), ga);
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                if needs(*a) {
                    let ga = gd
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(g, (x, y))| if x <= y { *g } else { 0.0 })
                        .collect();
                    accumulate(grads, *a, g.shape(), ga);
                }
                if needs(*b) {
                    let gb = gd
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(g, (x, y))| if x <= y { 0.0 } else { *g })
                        .collect();
                    accumulate(grads, *b, g.shape(), gb);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = self.val(*x).rows_cols();
                let gam = self.val(*gamma).data();
                if needs(*gamma) || needs(*beta) {
                    let mut gg = vec![0.0; cols];
                    let mut gbeta = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let gv = gd[r * cols + c];
                            gg[c] += gv * xhat[r * cols + c];
                            gbeta[c] += gv;
                        }
                    }
                    if needs(*gamma) {
                        accumulate(grads, *gamma, self.val(*gamma).shape(), gg);
                    }
                    if needs(*beta) {
                        accumulate(grads, *beta, self.val(*beta).shape(), gbeta);
                    }
                }
                if needs(*x) {
                    let mut gx = vec![0.0; rows * cols];
                    let inv = 1.0 / cols as f64;
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let d = gd[r * cols + c] * gam[c];
                            mean_d += d;
                            mean_dx += d * xhat[r * cols + c];
                        }
                        mean_d *= inv;
                        mean_dx *= inv;
                        for c in 0..cols {
                            let d = gd[r * cols + c] * gam[c];
                            gx[r * cols + c] =
                                rstd[r] * (d - mean_d - xhat[r * cols + c] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, self.val(*x).shape(), gx);
                }
            }
            Op::Embedding { table, ids } => {
                let t = self.val(*table);
                let (_, cols) = t.rows_cols();
                let mut gt = vec![0.0; t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        gt[id * cols + c] += gd[r * cols + c];
                    }
                }
                accumulate(grads, *table, t.shape(), gt);
            }
            Op::LogSoftmax(a) => {
                let out = &node.value;
                let (_, cols) = out.rows_cols();
                let mut ga = Vec::with_capacity(out.numel());
                for (grow, orow) in gd.chunks(cols).zip(out.data().chunks(cols)) {
                    let s: f64 = grow.iter().sum();
                    ga.extend(grow.iter().zip(orow).map(|(g, lp)| g - lp.exp() * s));
                }
                accumulate(grads, *a, out.shape(), ga);
            }
            Op::PickPerRow { x, idx } => {
                let src = self.val(*x);
                let (_, cols) = src.rows_cols();
                let mut gx = vec![0.0; src.numel()];
                for (r, &c) in idx.iter().enumerate() {
                    gx[r * cols + c] += gd[r];
                }
                accumulate(grads, *x, src.shape(), gx);
            }
            Op::SelectRows { x, rows } => {
                let src = self.val(*x);
                let (_, cols) = src.rows_cols();
                let mut gx = vec![0.0; src.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        gx[r * cols + c] += gd[k * cols + c];
                    }
                }
                accumulate(grads, *x, src.shape(), gx);
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let shape = self.val(*q).shape();
                let (t, d) = (shape[0], shape[1]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (
                    self.val(*q).data(),
                    self.val(*k).data(),
                    self.val(*v).data(),
                );
                let mut gq = vec![0.0; t * d];
                let mut gk = vec![0.0; t * d];
                let mut gv = vec![0.0; t * d];
                let mut dp = vec![0.0; t];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..t {
                        let prow = &probs[(h * t + i) * t..(h * t + i + 1) * t];
                        let go = &gd[i * d + off..i * d + off + dh];
                        let mut dot_pdp = 0.0;
                        for j in 0..=i {
                            dp[j] = tensor::dot(go, &vd[j * d + off..j * d + off + dh]);
                            dot_pdp += prow[j] * dp[j];
                            let gvrow = &mut gv[j * d + off..j * d + off + dh];
                            for (o, &gov) in gvrow.iter_mut().zip(go) {
                                *o += prow[j] * gov;
                            }
                        }
                        for j in 0..=i {
                            let ds = prow[j] * (dp[j] - dot_pdp) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..dh {
                                gq[i * d + off + c] += ds * kd[j * d + off + c];
                                gk[j * d + off + c] += ds * qd[i * d + off + c];
                            }
                        }
                    }
                }
                for (j, gj) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if needs(j) {
                        accumulate(grads, j, shape, gj);
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.val(*a).numel();
                accumulate(grads, *a, self.val(*a).shape(), vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.val(*a).numel();
                accumulate(grads, *a, self.val(*a).shape(), vec![gd[0] / n as f64; n]);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], j: usize, shape: &[usize], data: Vec<f64>) {
    match &mut grads[j] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape matches value"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
        assert_eq!(g.get(x).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn square_gradient_accumulates_at_fan_out() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.is_empty());
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 5.0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn detach_stops_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let d = tape.detach(x).unwrap();
        let y = tape.mul(x, d).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn causal_attention_first_row_copies_first_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let k = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let vt = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let v = tape.constant(vt.clone());
        let o = tape.causal_attention(q, k, v, 2).unwrap();
        let out = tape.value(o).unwrap();
        for c in 0..4 {
            assert!((out.row(0)[c] - vt.row(0)[c]).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.matmul(a, b).is_err());
        let c = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(a, c).is_err());
        assert!(tape.add_bias(a, b).is_err());
    }
}
