use super::conv::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    AddScalar(TensorId),
    MulScalar(TensorId, f64),
    AddRowBias(TensorId, TensorId),
    AddChannelBias(TensorId, TensorId),
    Relu(TensorId),
    Sigmoid(TensorId),
    Log(TensorId),
    Clamp(TensorId, f64, f64),
    Softmax(TensorId, usize),
    Concat(Vec<TensorId>, usize),
    SliceCols(TensorId, usize),
    Reshape(TensorId),
    Transpose2d(TensorId),
    Sum(TensorId),
    Mean(TensorId),
    MeanAxis0(TensorId),
    Conv2d(TensorId, TensorId, ConvGeom),
    ConvTranspose2d(TensorId, TensorId, ConvGeom),
}

struct Node {
    t: Tensor,
    op: Op,
}

/// Dynamic tape: records one forward pass, then propagates adjoints backwards.
///
/// Node indices are creation-ordered, so every op's inputs precede it and a
/// single reverse sweep visits each node exactly once.
pub struct Tape {
    nodes: Vec<Node>,
    /// Reject non-finite op outputs instead of letting NaN/inf propagate.
    pub check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf value. Gradients are collected for it iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        self.push(t, Op::Leaf)
    }

    /// Leaf that never takes gradients.
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(Tensor::scalar(v))
    }

    /// Copy of `id`'s value as a fresh gradient-less leaf.
    pub fn detach(&mut self, id: TensorId) -> TensorId {
        let t = Tensor {
            shape: self.shape(id).to_vec(),
            data: self.data(id).to_vec(),
            requires_grad: false,
            grad: None,
        };
        self.push(t, Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].t.shape()
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].t.data()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].t.grad.as_deref()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].t
    }

    /// Clone the value (shape + data) out of the tape.
    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        Tensor {
            shape: self.shape(id).to_vec(),
            data: self.data(id).to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    fn push(&mut self, t: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { t, op });
        TensorId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, name: &'static str) -> Result<TensorId> {
        if self.check_finite && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowBias(a, b)
            | Op::AddChannelBias(a, b)
            | Op::Conv2d(a, b, _)
            | Op::ConvTranspose2d(a, b, _) => {
                self.nodes[a.0].t.requires_grad || self.nodes[b.0].t.requires_grad
            }
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Clamp(a, _, _)
            | Op::Softmax(a, _)
            | Op::SliceCols(a, _)
            | Op::Reshape(a)
            | Op::Transpose2d(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanAxis0(a) => self.nodes[a.0].t.requires_grad,
            Op::Concat(ids, _) => ids.iter().any(|i| self.nodes[i.0].t.requires_grad),
        };
        let t = Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        };
        Ok(self.push(t, op))
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        self.push_op(vec![m, n], out, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_same_shape(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_same_shape(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_same_shape(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn zip_same_shape(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.push_op(self.shape(a).to_vec(), out, op, name)
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.data(x).iter().map(|v| v + c).collect();
        self.push_op(self.shape(x).to_vec(), out, Op::AddScalar(x), "add_scalar")
    }

    pub fn mul_scalar(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        self.push_op(self.shape(x).to_vec(), out, Op::MulScalar(x, c), "mul_scalar")
    }

    /// `x: [rows, d] + bias: [d]`, the one broadcast this tape supports
    /// besides scalars.
    pub fn add_row_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (rows, d) = (sx[0], sx[1]);
        let mut out = self.data(x).to_vec();
        let b = self.data(bias);
        for r in 0..rows {
            for (o, bv) in out[r * d..(r + 1) * d].iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push_op(vec![rows, d], out, Op::AddRowBias(x, bias), "add_row_bias")
    }

    /// `x: [c, h, w] + bias: [c]`, per-channel image bias.
    pub fn add_channel_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 3 || sb.len() != 1 || sx[0] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (c, hw) = (sx[0], sx[1] * sx[2]);
        let mut out = self.data(x).to_vec();
        let b = self.data(bias);
        for ch in 0..c {
            let bv = b[ch];
            for o in &mut out[ch * hw..(ch + 1) * hw] {
                *o += bv;
            }
        }
        self.push_op(
            sx.to_vec(),
            out,
            Op::AddChannelBias(x, bias),
            "add_channel_bias",
        )
    }

    /// Elementwise max(0, x); subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        self.push_op(self.shape(x).to_vec(), out, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        self.push_op(self.shape(x).to_vec(), out, Op::Sigmoid(x), "sigmoid")
    }

    /// Natural log; the input must be strictly positive (clamp first otherwise).
    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        if self.data(x).iter().any(|&v| v <= 0.0) {
            return Err(Error::LogDomain);
        }
        let out: Vec<f64> = self.data(x).iter().map(|v| v.ln()).collect();
        self.push_op(self.shape(x).to_vec(), out, Op::Log(x), "log")
    }

    /// Clamp into `[lo, hi]`; gradient passes through inside the interval.
    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> Result<TensorId> {
        if lo > hi {
            return Err(Error::Contract(format!("clamp: lo {lo} > hi {hi}")));
        }
        let out: Vec<f64> = self.data(x).iter().map(|v| v.clamp(lo, hi)).collect();
        self.push_op(self.shape(x).to_vec(), out, Op::Clamp(x, lo, hi), "clamp")
    }

    /// Softmax along `axis`, max-subtracted for stability. Each slice sums to 1.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let out = softmax_raw(self.data(x), &shape, axis);
        self.push_op(shape, out, Op::Softmax(x, axis), "softmax")
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, ids: &[TensorId], axis: usize) -> Result<TensorId> {
        if ids.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = self.shape(ids[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidAxis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut axis_total = 0;
        for &id in ids {
            let s = self.shape(id);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;

        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * axis_total * inner];
        let mut dst_off = 0;
        for &id in ids {
            let s_axis = self.shape(id)[axis];
            let src = self.data(id);
            for o in 0..outer {
                let src_base = o * s_axis * inner;
                let dst_base = (o * axis_total + dst_off) * inner;
                out[dst_base..dst_base + s_axis * inner]
                    .copy_from_slice(&src[src_base..src_base + s_axis * inner]);
            }
            dst_off += s_axis;
        }
        self.push_op(out_shape, out, Op::Concat(ids.to_vec(), axis), "concat")
    }

    /// Columns `[start, start+len)` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: s,
                rhs: vec![start, len],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let data = self.data(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&data[r * cols + start..r * cols + start + len]);
        }
        self.push_op(vec![rows, len], out, Op::SliceCols(x, start), "slice_cols")
    }

    pub fn reshape(&mut self, x: TensorId, new_shape: &[usize]) -> Result<TensorId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.data(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        self.push_op(new_shape.to_vec(), data, Op::Reshape(x), "reshape")
    }

    pub fn transpose2d(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let data = self.data(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = data[r * cols + c];
            }
        }
        self.push_op(vec![cols, rows], out, Op::Transpose2d(x), "transpose")
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.data(x).iter().sum();
        self.push_op(vec![1], vec![s], Op::Sum(x), "sum")
    }

    /// Mean of all entries, shape `[1]`.
    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.data(x).len() as f64;
        let s: f64 = self.data(x).iter().sum();
        self.push_op(vec![1], vec![s / n], Op::Mean(x), "mean")
    }

    /// Mean over rows: `[rows, d] -> [d]`.
    pub fn mean_axis0(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "mean_axis0",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (rows, d) = (s[0], s[1]);
        let data = self.data(x);
        let mut out = vec![0.0; d];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(&data[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        self.push_op(vec![d], out, Op::MeanAxis0(x), "mean_axis0")
    }

    /// 2-D cross-correlation: `x [c_in,h,w] * w [c_out,c_in,k,k] -> [c_out,h',w']`
    /// with `h' = (h + 2*pad - k)/stride + 1`.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let g = ConvGeom::new(sx[0], sx[1], sx[2], sw[0], sw[2], stride, pad)?;
        let mut out = vec![0.0; g.c_out * g.oh * g.ow];
        conv::fwd(self.data(x), self.data(w), &g, &mut out);
        self.push_op(
            vec![g.c_out, g.oh, g.ow],
            out,
            Op::Conv2d(x, w, g),
            "conv2d",
        )
    }

    /// Adjoint of [`Tape::conv2d`] with the same weight and geometry:
    /// `y [c_out,h',w'] -> [c_in, (h'-1)*stride + k - 2*pad, ...]`, satisfying
    /// `<conv2d(x,w), y> == <x, conv2d_transpose(y,w)>`.
    pub fn conv2d_transpose(
        &mut self,
        y: TensorId,
        w: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let (sy, sw) = (self.shape(y).to_vec(), self.shape(w).to_vec());
        if sy.len() != 3 || sw.len() != 4 || sw[0] != sy[0] || sw[2] != sw[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d_transpose",
                lhs: sy,
                rhs: sw,
            });
        }
        let k = sw[2];
        let (oh, ow) = (sy[1], sy[2]);
        if (oh - 1) * stride + k < 2 * pad + 1 || (ow - 1) * stride + k < 2 * pad + 1 {
            return Err(Error::ShapeMismatch {
                op: "conv2d_transpose (output would be empty)",
                lhs: sy,
                rhs: sw,
            });
        }
        let h = (oh - 1) * stride + k - 2 * pad;
        let wdt = (ow - 1) * stride + k - 2 * pad;
        let g = ConvGeom::new(sw[1], h, wdt, sy[0], k, stride, pad)?;
        debug_assert_eq!((g.oh, g.ow), (oh, ow));
        let mut out = vec![0.0; g.c_in * g.h * g.w];
        conv::dx(self.data(y), self.data(w), &g, &mut out);
        self.push_op(
            vec![g.c_in, g.h, g.w],
            out,
            Op::ConvTranspose2d(y, w, g),
            "conv2d_transpose",
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`, accumulating into `grad` of every
    /// `requires_grad` node. Each call adds one full pass worth of gradient:
    /// calling twice without zeroing doubles the grads.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0;
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(n + 1);
        adj.resize_with(n + 1, || None);
        adj[n] = Some(vec![1.0]);

        for i in (0..=n).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].t.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            let t = &mut self.nodes[i].t;
            match &mut t.grad {
                Some(acc) => {
                    for (a, gv) in acc.iter_mut().zip(&g) {
                        *a += gv;
                    }
                }
                None => t.grad = Some(g),
            }
        }
        Ok(())
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].t.requires_grad
    }

    fn accum(adj: &mut [Option<Vec<f64>>], id: TensorId, len: usize, f: impl FnOnce(&mut [f64])) {
        let slot = adj[id.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    // dA = g . B^T
                    let bt = transpose_raw(self.data(*b), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    Self::accum(adj, *a, m * k, |s| add_into(s, &da));
                }
                if self.needs(*b) {
                    // dB = A^T . g
                    let at = transpose_raw(self.data(*a), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    Self::accum(adj, *b, k * n, |s| add_into(s, &db));
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if self.needs(*id) {
                        Self::accum(adj, *id, g.len(), |s| add_into(s, g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    Self::accum(adj, *a, g.len(), |s| add_into(s, g));
                }
                if self.needs(*b) {
                    Self::accum(adj, *b, g.len(), |s| {
                        for (sv, gv) in s.iter_mut().zip(g) {
                            *sv -= gv;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bd = self.data(*b);
                    Self::accum(adj, *a, g.len(), |s| {
                        for ((sv, gv), bv) in s.iter_mut().zip(g).zip(bd) {
                            *sv += gv * bv;
                        }
                    });
                }
                if self.needs(*b) {
                    let ad = self.data(*a);
                    Self::accum(adj, *b, g.len(), |s| {
                        for ((sv, gv), av) in s.iter_mut().zip(g).zip(ad) {
                            *sv += gv * av;
                        }
                    });
                }
            }
            Op::AddScalar(a) => {
                if self.needs(*a) {
                    Self::accum(adj, *a, g.len(), |s| add_into(s, g));
                }
            }
            Op::MulScalar(a, c) => {
                if self.needs(*a) {
                    let c = *c;
                    Self::accum(adj, *a, g.len(), |s| {
                        for (sv, gv) in s.iter_mut().zip(g) {
                            *sv += c * gv;
                        }
                    });
                }
            }
            Op::AddRowBias(x, b) => {
                let d = self.shape(*b)[0];
                if self.needs(*x) {
                    Self::accum(adj, *x, g.len(), |s| add_into(s, g));
                }
                if self.needs(*b) {
                    Self::accum(adj, *b, d, |s| {
                        for row in g.chunks_exact(d) {
                            add_into(s, row);
                        }
                    });
                }
            }
            Op::AddChannelBias(x, b) => {
                let c = self.shape(*b)[0];
                let hw = g.len() / c;
                if self.needs(*x) {
                    Self::accum(adj, *x, g.len(), |s| add_into(s, g));
                }
                if self.needs(*b) {
                    Self::accum(adj, *b, c, |s| {
                        for (ch, sv) in s.iter_mut().enumerate() {
                            *sv += g[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let xd = self.data(*x);
                    Self::accum(adj, *x, g.len(), |s| {
                        for ((sv, gv), xv) in s.iter_mut().zip(g).zip(xd) {
                            if *xv > 0.0 {
                                *sv += gv;
                            }
                        }
                    });
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let out = node.t.data();
                    Self::accum(adj, *x, g.len(), |s| {
                        for ((sv, gv), ov) in s.iter_mut().zip(g).zip(out) {
                            *sv += gv * ov * (1.0 - ov);
                        }
                    });
                }
            }
            Op::Log(x) => {
                if self.needs(*x) {
                    let xd = self.data(*x);
                    Self::accum(adj, *x, g.len(), |s| {
                        for ((sv, gv), xv) in s.iter_mut().zip(g).zip(xd) {
                            *sv += gv / xv;
                        }
                    });
                }
            }
            Op::Clamp(x, lo, hi) => {
                if self.needs(*x) {
                    let (lo, hi) = (*lo, *hi);
                    let xd = self.data(*x);
                    Self::accum(adj, *x, g.len(), |s| {
                        for ((sv, gv), xv) in s.iter_mut().zip(g).zip(xd) {
                            if *xv >= lo && *xv <= hi {
                                *sv += gv;
                            }
                        }
                    });
                }
            }
            Op::Softmax(x, axis) => {
                if self.needs(*x) {
                    let out = node.t.data();
                    let shape = node.t.shape();
                    let axis_n = shape[*axis];
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    Self::accum(adj, *x, g.len(), |s| {
                        for o in 0..outer {
                            for i_in in 0..inner {
                                let mut dot = 0.0;
                                for a in 0..axis_n {
                                    let idx = (o * axis_n + a) * inner + i_in;
                                    dot += g[idx] * out[idx];
                                }
                                for a in 0..axis_n {
                                    let idx = (o * axis_n + a) * inner + i_in;
                                    s[idx] += out[idx] * (g[idx] - dot);
                                }
                            }
                        }
                    });
                }
            }
            Op::Concat(ids, axis) => {
                let out_shape = node.t.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut off = 0;
                for id in ids {
                    let s_axis = self.shape(*id)[*axis];
                    if self.needs(*id) {
                        let len = self.data(*id).len();
                        Self::accum(adj, *id, len, |s| {
                            for o in 0..outer {
                                let src = (o * axis_total + off) * inner;
                                let dst = o * s_axis * inner;
                                add_into(
                                    &mut s[dst..dst + s_axis * inner],
                                    &g[src..src + s_axis * inner],
                                );
                            }
                        });
                    }
                    off += s_axis;
                }
            }
            Op::SliceCols(x, start) => {
                if self.needs(*x) {
                    let sx = self.shape(*x);
                    let (rows, cols) = (sx[0], sx[1]);
                    let len = node.t.shape()[1];
                    let start = *start;
                    Self::accum(adj, *x, rows * cols, |s| {
                        for r in 0..rows {
                            add_into(
                                &mut s[r * cols + start..r * cols + start + len],
                                &g[r * len..(r + 1) * len],
                            );
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    Self::accum(adj, *x, g.len(), |s| add_into(s, g));
                }
            }
            Op::Transpose2d(x) => {
                if self.needs(*x) {
                    let out_shape = node.t.shape();
                    let (rows, cols) = (out_shape[0], out_shape[1]);
                    let gt = transpose_raw(g, rows, cols);
                    Self::accum(adj, *x, g.len(), |s| add_into(s, &gt));
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let len = self.data(*x).len();
                    let gv = g[0];
                    Self::accum(adj, *x, len, |s| {
                        for sv in s.iter_mut() {
                            *sv += gv;
                        }
                    });
                }
            }
            Op::Mean(x) => {
                if self.needs(*x) {
                    let len = self.data(*x).len();
                    let gv = g[0] / len as f64;
                    Self::accum(adj, *x, len, |s| {
                        for sv in s.iter_mut() {
                            *sv += gv;
                        }
                    });
                }
            }
            Op::MeanAxis0(x) => {
                if self.needs(*x) {
                    let sx = self.shape(*x);
                    let (rows, d) = (sx[0], sx[1]);
                    Self::accum(adj, *x, rows * d, |s| {
                        for r in 0..rows {
                            for (sv, gv) in s[r * d..(r + 1) * d].iter_mut().zip(g) {
                                *sv += gv / rows as f64;
                            }
                        }
                    });
                }
            }
            Op::Conv2d(x, w, geom) => {
                if self.needs(*x) {
                    let mut dximg = vec![0.0; geom.c_in * geom.h * geom.w];
                    conv::dx(g, self.data(*w), geom, &mut dximg);
                    Self::accum(adj, *x, dximg.len(), |s| add_into(s, &dximg));
                }
                if self.needs(*w) {
                    let mut dwgt = vec![0.0; geom.c_out * geom.c_in * geom.k * geom.k];
                    conv::dw(self.data(*x), g, geom, &mut dwgt);
                    Self::accum(adj, *w, dwgt.len(), |s| add_into(s, &dwgt));
                }
            }
            Op::ConvTranspose2d(y, w, geom) => {
                if self.needs(*y) {
                    let mut dy = vec![0.0; geom.c_out * geom.oh * geom.ow];
                    conv::fwd(g, self.data(*w), geom, &mut dy);
                    Self::accum(adj, *y, dy.len(), |s| add_into(s, &dy));
                }
                if self.needs(*w) {
                    let mut dwgt = vec![0.0; geom.c_out * geom.c_in * geom.k * geom.k];
                    conv::dw(g, self.data(*y), geom, &mut dwgt);
                    Self::accum(adj, *w, dwgt.len(), |s| add_into(s, &dwgt));
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn softmax_raw(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i_in in 0..inner {
            let mut max = f64::NEG_INFINITY;
            for a in 0..axis_n {
                max = max.max(data[(o * axis_n + a) * inner + i_in]);
            }
            let mut denom = 0.0;
            for a in 0..axis_n {
                let idx = (o * axis_n + a) * inner + i_in;
                let e = (data[idx] - max).exp();
                out[idx] = e;
                denom += e;
            }
            for a in 0..axis_n {
                out[(o * axis_n + a) * inner + i_in] /= denom;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn approx(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.data(c), tape.data(b));
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(vec![2, 1], vec![5.0, 6.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_scalar_oracle() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
        let s = tape.softmax(x, 0).unwrap();
        assert!(approx(tape.data(s), &[1.0 / 3.0; 3], 1e-12));

        let y = tape.constant(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sy = tape.softmax(y, 0).unwrap();
        assert!(approx(tape.data(sy), &[0.0900, 0.2447, 0.6652], 1e-4));
    }

    #[test]
    fn softmax_shift_invariance_and_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let x = Tensor::rand_uniform(&[4, 5], -3.0, 3.0, &mut rng);
            let c: f64 = rng.gen_range(-10.0..10.0);
            let mut tape = Tape::new();
            let a = tape.constant(x.clone());
            let sa = tape.softmax(a, 1).unwrap();
            let b = tape.add_scalar(a, c).unwrap();
            let sb = tape.softmax(b, 1).unwrap();
            assert!(approx(tape.data(sa), tape.data(sb), 1e-12));
            for row in tape.data(sa).chunks_exact(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relu_basics() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.data(r), &[0.0, 0.0, 2.0]);
        let rr = tape.relu(r).unwrap();
        assert_eq!(tape.data(rr), tape.data(r));
    }

    #[test]
    fn backward_sum_gives_ones_and_accumulates_fanout() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let s1 = tape.sum(x).unwrap();
        let s2 = tape.sum(x).unwrap();
        let total = tape.add(s1, s2).unwrap();
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_square_analytic() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_doubles() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![3.0, -1.0]).unwrap().with_grad());
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]).with_grad());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let a = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
            let b = Tensor::rand_uniform(&[4, 2], -1.0, 1.0, &mut rng);
            let err = crate::tensor::grad_check(
                |tape, ids| {
                    let c = tape.matmul(ids[0], ids[1])?;
                    tape.sum(c)
                },
                &[a, b],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "matmul grad rel err {err}");
        }
    }

    #[test]
    fn relu_grad_mask_away_from_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            // keep inputs away from the kink at 0
            let data: Vec<f64> = (0..12)
                .map(|_| {
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    sign * rng.gen_range(0.1..1.0)
                })
                .collect();
            let x = Tensor::from_vec(vec![12], data).unwrap();
            let err = crate::tensor::grad_check(
                |tape, ids| {
                    let r = tape.relu(ids[0])?;
                    tape.sum(r)
                },
                &[x.clone()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "relu grad rel err {err}");

            let mut tape = Tape::new();
            let id = tape.leaf(x.clone().with_grad());
            let r = tape.relu(id).unwrap();
            let loss = tape.sum(r).unwrap();
            tape.backward(loss).unwrap();
            let mask: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
            assert_eq!(tape.grad(id).unwrap(), mask.as_slice());
        }
    }

    #[test]
    fn mean_grad_is_uniform() {
        let x = Tensor::from_vec(vec![5], vec![1.0, -2.0, 0.5, 3.0, 4.0]).unwrap();
        let err = crate::tensor::grad_check(
            |tape, ids| tape.mean(ids[0]),
            &[x.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);

        let mut tape = Tape::new();
        let id = tape.leaf(x.with_grad());
        let m = tape.mean(id).unwrap();
        tape.backward(m).unwrap();
        assert!(approx(tape.grad(id).unwrap(), &[0.2; 5], 1e-15));
    }

    #[test]
    fn elementwise_suite_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng);
            let b = Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng);
            let bias = Tensor::rand_uniform(&[3], -1.0, 1.0, &mut rng);
            let err = crate::tensor::grad_check(
                |tape, ids| {
                    let s = tape.sub(ids[0], ids[1])?;
                    let m = tape.mul(s, ids[0])?;
                    let c = tape.mul_scalar(m, 1.7)?;
                    let c = tape.add_scalar(c, 0.3)?;
                    let rb = tape.add_row_bias(c, ids[2])?;
                    let sg = tape.sigmoid(rb)?;
                    let t = tape.transpose2d(sg)?;
                    let r = tape.reshape(t, &[6])?;
                    tape.sum(r)
                },
                &[a, b, bias],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "elementwise grad rel err {err}");
        }
    }

    #[test]
    fn softmax_composed_loss_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let x = Tensor::rand_uniform(&[3, 4], -2.0, 2.0, &mut rng);
            let w = Tensor::rand_uniform(&[4, 4], -1.0, 1.0, &mut rng);
            let err = crate::tensor::grad_check(
                |tape, ids| {
                    let y = tape.matmul(ids[0], ids[1])?;
                    let s = tape.softmax(y, 1)?;
                    let l = tape.log(s)?;
                    let m = tape.mean(l)?;
                    tape.mul_scalar(m, -1.0)
                },
                &[x, w],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "softmax composed grad rel err {err}");
        }
    }

    #[test]
    fn concat_and_slice_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::rand_uniform(&[2, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let err = crate::tensor::grad_check(
            |tape, ids| {
                let c = tape.concat(&[ids[0], ids[1]], 0)?;
                let s = tape.slice_cols(c, 1, 2)?;
                let sq = tape.mul(s, s)?;
                tape.sum(sq)
            },
            &[a.clone(), b.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "concat/slice grad rel err {err}");

        let mut tape = Tape::new();
        let ia = tape.constant(a);
        let ib = tape.constant(b);
        let c = tape.concat(&[ia, ib], 0).unwrap();
        assert_eq!(tape.shape(c), &[5, 4]);
        let bad = tape.constant(Tensor::zeros(&[2, 5]));
        assert!(tape.concat(&[ia, bad], 0).is_err());
    }

    #[test]
    fn clamp_and_log_paths() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![3], vec![-0.5, 0.5, 1.5]).unwrap());
        assert!(matches!(tape.log(x), Err(crate::Error::LogDomain)));
        let c = tape.clamp(x, 1e-7, 1.0).unwrap();
        assert!(tape.log(c).is_ok());
        assert_eq!(tape.data(c), &[1e-7, 0.5, 1.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.data(s), &[0.5]);
    }

    #[test]
    fn conv2d_one_by_one_is_channel_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::rand_uniform(&[2, 3, 3], 0.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform(&[4, 2, 1, 1], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let ix = tape.constant(x.clone());
        let iw = tape.constant(w.clone());
        let out = tape.conv2d(ix, iw, 1, 0).unwrap();
        assert_eq!(tape.shape(out), &[4, 3, 3]);
        // per-pixel matmul over channels
        for co in 0..4 {
            for p in 0..9 {
                let want: f64 = (0..2).map(|ci| w.data()[co * 2 + ci] * x.data()[ci * 9 + p]).sum();
                let got = tape.data(out)[co * 9 + p];
                assert!((want - got).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_one_hot_patch() {
        // 3x3 all-ones kernel on a one-hot 5x5 image, pad 0: ones at valid offsets
        let mut img = Tensor::zeros(&[1, 5, 5]);
        img.data_mut()[2 * 5 + 2] = 1.0;
        let w = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let mut tape = Tape::new();
        let ix = tape.constant(img);
        let iw = tape.constant(w);
        let out = tape.conv2d(ix, iw, 1, 0).unwrap();
        assert_eq!(tape.shape(out), &[1, 3, 3]);
        assert!(approx(tape.data(out), &[1.0; 9], 1e-15));
    }

    /// Naive six-nested-loop convolution, independent of the tape kernels.
    fn conv_naive(
        x: &Tensor,
        w: &Tensor,
        stride: usize,
        pad: usize,
    ) -> (Vec<usize>, Vec<f64>) {
        let (ci_n, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co_n, k) = (w.shape()[0], w.shape()[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; co_n * oh * ow];
        for co in 0..co_n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..ci_n {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.data()[(ci * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((co * ci_n + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        (vec![co_n, oh, ow], out)
    }

    #[test]
    fn conv2d_matches_naive_loops_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &(stride, pad, k) in &[(1usize, 0usize, 3usize), (1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 2, 5)] {
            let x = Tensor::rand_uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
            let w = Tensor::rand_uniform(&[3, 2, k, k], -1.0, 1.0, &mut rng);
            if k > 4 + 2 * pad {
                continue;
            }
            let (nshape, nout) = conv_naive(&x, &w, stride, pad);
            let mut tape = Tape::new();
            let ix = tape.constant(x);
            let iw = tape.constant(w);
            let out = tape.conv2d(ix, iw, stride, pad).unwrap();
            assert_eq!(tape.shape(out), nshape.as_slice());
            // f64: identical sums of identical products, though association differs;
            // allow only the tiniest slack
            assert!(approx(tape.data(out), &nout, 1e-12));
        }
    }

    #[test]
    fn conv2d_kernel_larger_than_padded_input_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 3]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(tape.conv2d(x, w, 1, 0).is_err());
    }

    #[test]
    fn conv2d_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let x = Tensor::rand_uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
            let w = Tensor::rand_uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
            let err = crate::tensor::grad_check(
                |tape, ids| {
                    let c = tape.conv2d(ids[0], ids[1], 2, 1)?;
                    let r = tape.relu(c)?;
                    tape.sum(r)
                },
                &[x, w],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "conv2d grad rel err {err}");
        }
    }

    #[test]
    fn conv_transpose_adjoint_identity() {
        // <conv2d(x,w), y> == <x, conv2d_transpose(y,w)>
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for &(stride, pad, k, h) in &[(1usize, 0usize, 3usize, 5usize), (2, 1, 3, 5), (2, 1, 4, 6), (1, 1, 3, 4)] {
            let x = Tensor::rand_uniform(&[2, h, h], -1.0, 1.0, &mut rng);
            let w = Tensor::rand_uniform(&[3, 2, k, k], -1.0, 1.0, &mut rng);
            let mut tape = Tape::new();
            let ix = tape.constant(x);
            let iw = tape.constant(w);
            let cx = tape.conv2d(ix, iw, stride, pad).unwrap();
            let y = Tensor::rand_uniform(tape.shape(cx), -1.0, 1.0, &mut rng);
            let iy = tape.constant(y);
            let ty = tape.conv2d_transpose(iy, iw, stride, pad).unwrap();
            assert_eq!(tape.shape(ty), tape.shape(ix));

            let lhs: f64 = tape.data(cx).iter().zip(tape.data(iy)).map(|(a, b)| a * b).sum();
            let rhs: f64 = tape.data(ix).iter().zip(tape.data(ty)).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "adjoint identity: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_transpose_self_adjoint_1x1() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::rand_uniform(&[1, 3, 3], -1.0, 1.0, &mut rng);
        let w = Tensor::from_vec(vec![1, 1, 1, 1], vec![2.5]).unwrap();
        let mut tape = Tape::new();
        let ix = tape.constant(x.clone());
        let iw = tape.constant(w);
        let t = tape.conv2d_transpose(ix, iw, 1, 0).unwrap();
        let want: Vec<f64> = x.data().iter().map(|v| v * 2.5).collect();
        assert!(approx(tape.data(t), &want, 1e-15));
    }

    #[test]
    fn conv_transpose_stride2_geometry() {
        // transpose of a stride-2 conv on 4x4 -> 8x8 with matching padding
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::zeros(&[1, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let t = tape.conv2d_transpose(y, w, 2, 1).unwrap();
        assert_eq!(tape.shape(t), &[2, 8, 8]);
    }

    #[test]
    fn conv_transpose_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let y = Tensor::rand_uniform(&[2, 3, 3], -1.0, 1.0, &mut rng);
            let w = Tensor::rand_uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
            let err = crate::tensor::grad_check(
                |tape, ids| {
                    let t = tape.conv2d_transpose(ids[0], ids[1], 2, 1)?;
                    let sq = tape.mul(t, t)?;
                    tape.mean(sq)
                },
                &[y, w],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "conv_transpose grad rel err {err}");
        }
    }

    #[test]
    fn mean_axis0_and_channel_bias_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::rand_uniform(&[3, 2, 2], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[3], -1.0, 1.0, &mut rng);
        let m = Tensor::rand_uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let err = crate::tensor::grad_check(
            |tape, ids| {
                let xb = tape.add_channel_bias(ids[0], ids[1])?;
                let flat = tape.reshape(xb, &[3, 4])?;
                let z = tape.matmul(ids[2], flat)?;
                let p = tape.mean_axis0(z)?;
                let p2 = tape.reshape(p, &[1, 4])?;
                let q = tape.mul(p2, p2)?;
                tape.sum(q)
            },
            &[x, b, m],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "mean_axis0/channel_bias grad rel err {err}");
    }

    #[test]
    fn grad_check_linear_is_tight() {
        let x = Tensor::from_vec(vec![4], vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        let err = crate::tensor::grad_check(
            |tape, ids| {
                let s = tape.mul_scalar(ids[0], 3.0)?;
                tape.sum(s)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "linear grad_check err {err}");
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let d = tape.detach(x);
        let y = tape.mul(d, d).unwrap();
        let mut loss = tape.sum(y).unwrap();
        let s2 = tape.sum(x).unwrap();
        loss = tape.add(loss, s2).unwrap();
        tape.backward(loss).unwrap();
        // only the direct sum path contributes
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let big = tape.constant(Tensor::filled(&[2, 2], 1e308));
        let r = tape.matmul(big, big);
        assert!(matches!(r, Err(crate::Error::NonFinite { .. })));
    }
}
