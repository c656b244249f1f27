//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and the ids of its inputs, so the node list is already in topological
//! order. [`Graph::backward`] walks it once in reverse, accumulating gradients
//! additively (fan-out sums, never overwrites). A graph is consumed by
//! backward; running it twice without a fresh forward is an error.
//!
//! Heavy kernels (convolution GEMMs, matmul) split their work into fixed-size
//! chunks processed with rayon. Every output element is still reduced in a
//! fixed sequential order, so results are bit-identical regardless of the
//! number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{strides_of, Tensor};
use crate::transforms::RigidTransform;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnOp {
    Exp,
    Log,
    Neg,
    Square,
    Sqrt,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Binary { op: BinOp, a: NodeId, b: NodeId },
    Unary { op: UnOp, a: NodeId },
    Scale { a: NodeId, c: f64 },
    AddScalar { a: NodeId },
    Matmul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Softmax { a: NodeId, axis: usize },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
        /// im2col panel saved from the forward pass (shared, not re-derived).
        cols: std::sync::Arc<Vec<f64>>,
    },
    AvgPool2d { a: NodeId, kernel: usize, stride: usize },
    MaxPool2d { a: NodeId, kernel: usize, stride: usize },
    Reduce { op: ReduceOp, a: NodeId, axes: Vec<usize> },
    Narrow { a: NodeId, axis: usize, start: usize, len: usize },
    Concat { axis: usize, parts: Vec<NodeId> },
    Reshape { a: NodeId },
    Warp { a: NodeId, transform: RigidTransform },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of executed operations plus, after `backward`, the leaf gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Inserts a leaf. It participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let needs_grad = t.requires_grad();
        self.push(Node {
            value: Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("leaf shape"),
            op: if needs_grad { Op::Leaf } else { Op::Constant },
            needs_grad,
        })
    }

    /// Inserts a constant that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Node { value: t, op: Op::Constant, needs_grad: false })
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient of the last backward root w.r.t. a leaf, if it received one.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, node: Node) -> NodeId {
        debug_assert!(!self.consumed, "graph extended after backward");
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinOp::Mul, a, b)
    }

    /// Exact elementwise quotient; any zero in `b` is a numeric-domain error.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.data(b).iter().any(|&v| v == 0.0) {
            return Err(Error::Numeric("division by zero".into()));
        }
        self.binary(BinOp::Div, a, b)
    }

    fn binary(&mut self, op: BinOp, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out_shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let f = |x: f64, y: f64| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let data = if self.shape(a) == self.shape(b) {
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            broadcast_zip(av, bv, &out_shape, f)
        };
        let needs_grad = self.needs(a) || self.needs(b);
        Ok(self.push(Node {
            value: Tensor::new(out_shape, data)?,
            op: Op::Binary { op, a, b },
            needs_grad,
        }))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnOp::Exp, a)
    }

    /// Natural log; non-positive inputs are a numeric-domain error.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.data(a).iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("log of non-positive value".into()));
        }
        self.unary(UnOp::Log, a)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnOp::Neg, a)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnOp::Square, a)
    }

    /// Square root; negative inputs are a numeric-domain error. The gradient
    /// at exactly zero is unguarded (caller keeps arguments positive).
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if self.data(a).iter().any(|&v| v < 0.0) {
            return Err(Error::Numeric("sqrt of negative value".into()));
        }
        self.unary(UnOp::Sqrt, a)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnOp::Relu, a)
    }

    fn unary(&mut self, op: UnOp, a: NodeId) -> Result<NodeId> {
        let f = |x: f64| match op {
            UnOp::Exp => x.exp(),
            UnOp::Log => x.ln(),
            UnOp::Neg => -x,
            UnOp::Square => x * x,
            UnOp::Sqrt => x.sqrt(),
            UnOp::Relu => x.max(0.0),
        };
        let data: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let needs_grad = self.needs(a);
        Ok(self.push(Node {
            value: Tensor::new(self.shape(a).to_vec(), data)?,
            op: Op::Unary { op, a },
            needs_grad,
        }))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.data(a).iter().map(|&x| c * x).collect();
        let needs_grad = self.needs(a);
        Ok(self.push(Node {
            value: Tensor::new(self.shape(a).to_vec(), data)?,
            op: Op::Scale { a, c },
            needs_grad,
        }))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x + c).collect();
        let needs_grad = self.needs(a);
        Ok(self.push(Node {
            value: Tensor::new(self.shape(a).to_vec(), data)?,
            op: Op::AddScalar { a },
            needs_grad,
        }))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape(format!("matmul needs 2-d operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner extents differ: {k} vs {k2}")));
        }
        let data = mm_nn(self.data(a), self.data(b), m, k, n);
        let needs_grad = self.needs(a) || self.needs(b);
        Ok(self.push(Node {
            value: Tensor::new(vec![m, n], data)?,
            op: Op::Matmul { a, b },
            needs_grad,
        }))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose needs a 2-d operand, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.data(a);
        let mut data = vec![0.0; src.len()];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = src[i * cols + j];
            }
        }
        let needs_grad = self.needs(a);
        Ok(self.push(Node {
            value: Tensor::new(vec![cols, rows], data)?,
            op: Op::Transpose { a },
            needs_grad,
        }))
    }

    // ── nonlinear blocks ────────────────────────────────────────────────

    /// Softmax along `axis`, computed with max subtraction so magnitudes up
    /// to ~1e3 neither overflow nor lose the sum-to-one property.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, mid, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * mid * inner + i;
                let mut hi = f64::NEG_INFINITY;
                for m in 0..mid {
                    hi = hi.max(src[base + m * inner]);
                }
                let mut total = 0.0;
                for m in 0..mid {
                    let e = (src[base + m * inner] - hi).exp();
                    data[base + m * inner] = e;
                    total += e;
                }
                for m in 0..mid {
                    data[base + m * inner] /= total;
                }
            }
        }
        let needs_grad = self.needs(a);
        Ok(self.push(Node {
            value: Tensor::new(shape, data)?,
            op: Op::Softmax { a, axis },
            needs_grad,
        }))
    }

    /// 2-d cross-correlation over a `[C_in, H, W]` input with
    /// `[C_out, C_in, k, k]` kernels and a `[C_out]` bias.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if si.len() != 3 || sw.len() != 4 || sb.len() != 1 {
            return Err(Error::Shape(format!(
                "conv2d expects input [C,H,W], weight [O,C,k,k], bias [O]; got {si:?}, {sw:?}, {sb:?}"
            )));
        }
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let (c_out, c_in2, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if c_in != c_in2 || kh != kw || sb[0] != c_out {
            return Err(Error::Shape(format!(
                "conv2d extent mismatch: input channels {c_in}, weight {sw:?}, bias {sb:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let k = kh;
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(Error::Shape(format!(
                "conv2d kernel {k} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        let cols = im2col(self.data(input), c_in, h, w, k, stride, padding, oh, ow);
        let npix = oh * ow;
        let q = c_in * k * k;
        let mut out = mm_nn(self.data(weight), &cols, c_out, q, npix);
        let bdat = self.data(bias);
        for (oc, row) in out.chunks_exact_mut(npix).enumerate() {
            let bv = bdat[oc];
            for o in row {
                *o += bv;
            }
        }
        let needs_grad = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(Node {
            value: Tensor::new(vec![c_out, oh, ow], out)?,
            op: Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
                cols: std::sync::Arc::new(cols),
            },
            needs_grad,
        }))
    }

    /// Average pooling over the valid region (no padding).
    pub fn avgpool2d(&mut self, a: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 3 {
            return Err(Error::Shape(format!("avgpool2d expects [C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if h < kernel || w < kernel {
            return Err(Error::Shape(format!(
                "avgpool2d kernel {kernel} exceeds input {h}x{w}"
            )));
        }
        if stride == 0 || kernel == 0 {
            return Err(Error::Config("avgpool2d kernel and stride must be >= 1".into()));
        }
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let src = self.data(a);
        let norm = 1.0 / (kernel * kernel) as f64;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..kernel {
                        let row = &plane[(oy * stride + ky) * w + ox * stride..];
                        for kx in 0..kernel {
                            acc += row[kx];
                        }
                    }
                    dst[oy * ow + ox] = acc * norm;
                }
            }
        }
        let needs_grad = self.needs(a);
        Ok(self.push(Node {
            value: Tensor::new(vec![c, oh, ow], out)?,
            op: Op::AvgPool2d { a, kernel, stride },
            needs_grad,
        }))
    }

    /// Max pooling over the valid region; the gradient routes to the first
    /// maximal element of each window.
    pub fn maxpool2d(&mut self, a: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 3 {
            return Err(Error::Shape(format!("maxpool2d expects [C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if h < kernel || w < kernel {
            return Err(Error::Shape(format!(
                "maxpool2d kernel {kernel} exceeds input {h}x{w}"
            )));
        }
        if stride == 0 || kernel == 0 {
            return Err(Error::Config("maxpool2d kernel and stride must be >= 1".into()));
        }
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let src = self.data(a);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..kernel {
                        let row = &plane[(oy * stride + ky) * w + ox * stride..];
                        for kx in 0..kernel {
                            if row[kx] > best {
                                best = row[kx];
                            }
                        }
                    }
                    dst[oy * ow + ox] = best;
                }
            }
        }
        let needs_grad = self.needs(a);
        Ok(self.push(Node {
            value: Tensor::new(vec![c, oh, ow], out)?,
            op: Op::MaxPool2d { a, kernel, stride },
            needs_grad,
        }))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.reduce(ReduceOp::Sum, a, axes)
    }

    pub fn mean(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.reduce(ReduceOp::Mean, a, axes)
    }

    /// Max reduction. Gradient routes to the first maximal element of each
    /// reduced group (lowest linear index breaks ties).
    pub fn max(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.reduce(ReduceOp::Max, a, axes)
    }

    /// Reduction over `axes`; reduced axes are kept with extent 1 so results
    /// broadcast back naturally.
    pub fn reduce(&mut self, op: ReduceOp, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        validate_axes(&shape, axes)?;
        let count: usize = axes.iter().map(|&ax| shape[ax]).product();
        if count == 0 || shape.iter().product::<usize>() == 0 {
            return Err(Error::Numeric("reduction over an empty extent".into()));
        }
        let mut out_shape = shape.clone();
        for &ax in axes {
            out_shape[ax] = 1;
        }
        let out_len: usize = out_shape.iter().product();
        let src = self.data(a);
        let mut out = match op {
            ReduceOp::Max => vec![f64::NEG_INFINITY; out_len],
            _ => vec![0.0; out_len],
        };
        let in_strides = strides_of(&shape);
        let out_strides = strides_of(&out_shape);
        for (lin, &v) in src.iter().enumerate() {
            let o = reduced_index(lin, &shape, &in_strides, &out_shape, &out_strides);
            match op {
                ReduceOp::Sum | ReduceOp::Mean => out[o] += v,
                ReduceOp::Max => {
                    if v > out[o] {
                        out[o] = v;
                    }
                }
            }
        }
        if op == ReduceOp::Mean {
            let inv = 1.0 / count as f64;
            for v in &mut out {
                *v *= inv;
            }
        }
        let needs_grad = self.needs(a);
        Ok(self.push(Node {
            value: Tensor::new(out_shape, out)?,
            op: Op::Reduce { op, a, axes: axes.to_vec() },
            needs_grad,
        }))
    }

    // ── structure ───────────────────────────────────────────────────────

    /// Contiguous sub-block `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Shape(format!(
                "narrow [{start}, {start}+{len}) on axis {axis} invalid for {shape:?}"
            )));
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mid = shape[axis];
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs_grad = self.needs(a);
        Ok(self.push(Node {
            value: Tensor::new(out_shape, out)?,
            op: Op::Narrow { a, axis, start, len },
            needs_grad,
        }))
    }

    /// Concatenation along `axis`; operands must agree on all other extents.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Precondition("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::Shape(format!(
                    "concat operand shape {s:?} incompatible with {first:?} along axis {axis}"
                )));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let mid = self.shape(p)[axis];
                let src = self.data(p);
                out.extend_from_slice(&src[o * mid * inner..(o + 1) * mid * inner]);
            }
        }
        let needs_grad = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Node {
            value: Tensor::new(out_shape, out)?,
            op: Op::Concat { axis, parts: parts.to_vec() },
            needs_grad,
        }))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.data(a).len() {
            return Err(Error::Shape(format!(
                "reshape to {shape:?} changes element count {} -> {n}",
                self.data(a).len()
            )));
        }
        let data = self.data(a).to_vec();
        let needs_grad = self.needs(a);
        Ok(self.push(Node { value: Tensor::new(shape, data)?, op: Op::Reshape { a }, needs_grad }))
    }

    /// Differentiable rigid warp of a `[C, H, W]` map (bilinear, zero fill).
    pub fn warp(&mut self, a: NodeId, transform: &RigidTransform) -> Result<NodeId> {
        let value = crate::transforms::warp(&self.nodes[a.0].value, transform)?;
        let needs_grad = self.needs(a);
        Ok(self.push(Node { value, op: Op::Warp { a, transform: *transform }, needs_grad }))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar `root`. Visits each node once in reverse
    /// topological order; the graph is consumed afterwards.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::Precondition(
                "backward called twice on the same graph; run a new forward first".into(),
            ));
        }
        if self.data(root).len() != 1 {
            return Err(Error::Precondition(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf | Op::Constant) {
                continue; // keep leaf grads readable after the pass
            }
            let Some(grad) = grads[i].take() else { continue };
            self.propagate(i, &op, &grad, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
        if !self.needs(id) {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.data(id).len()]);
        debug_assert_eq!(slot.len(), delta.len());
        for (g, d) in slot.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn propagate(&self, i: usize, op: &Op, grad: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Binary { op, a, b } => self.backward_binary(i, *op, *a, *b, grad, grads),
            Op::Unary { op, a } => {
                let av = self.data(*a);
                let out = self.data(NodeId(i));
                let delta: Vec<f64> = match op {
                    UnOp::Exp => grad.iter().zip(out).map(|(&g, &y)| g * y).collect(),
                    UnOp::Log => grad.iter().zip(av).map(|(&g, &x)| g / x).collect(),
                    UnOp::Neg => grad.iter().map(|&g| -g).collect(),
                    UnOp::Square => grad.iter().zip(av).map(|(&g, &x)| 2.0 * x * g).collect(),
                    UnOp::Sqrt => grad.iter().zip(out).map(|(&g, &y)| 0.5 * g / y).collect(),
                    UnOp::Relu => grad
                        .iter()
                        .zip(av)
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                };
                self.accumulate(grads, *a, &delta);
            }
            Op::Scale { a, c } => {
                let delta: Vec<f64> = grad.iter().map(|&g| c * g).collect();
                self.accumulate(grads, *a, &delta);
            }
            Op::AddScalar { a } => self.accumulate(grads, *a, grad),
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let da = mm_nt(grad, self.data(*b), m, n, k);
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db = mm_tn(self.data(*a), grad, m, k, n);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Transpose { a } => {
                let (rows, cols) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut delta = vec![0.0; grad.len()];
                // grad has shape [cols, rows]
                for j in 0..cols {
                    for ii in 0..rows {
                        delta[ii * cols + j] = grad[j * rows + ii];
                    }
                }
                self.accumulate(grads, *a, &delta);
            }
            Op::Softmax { a, axis } => {
                let shape = self.shape(*a);
                let out = self.data(NodeId(i));
                let (outer, mid, inner) = split_axis(shape, *axis);
                let mut delta = vec![0.0; out.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * mid * inner + ii;
                        let mut dot = 0.0;
                        for m in 0..mid {
                            let f = base + m * inner;
                            dot += grad[f] * out[f];
                        }
                        for m in 0..mid {
                            let f = base + m * inner;
                            delta[f] = out[f] * (grad[f] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, &delta);
            }
            Op::Conv2d { input, weight, bias, stride, padding, cols } => {
                self.backward_conv2d(i, *input, *weight, *bias, *stride, *padding, cols, grad, grads);
            }
            Op::AvgPool2d { a, kernel, stride } => {
                let s = self.shape(*a);
                let (c, h, w) = (s[0], s[1], s[2]);
                let os = self.shape(NodeId(i));
                let (oh, ow) = (os[1], os[2]);
                let norm = 1.0 / (kernel * kernel) as f64;
                let mut delta = vec![0.0; c * h * w];
                for ch in 0..c {
                    let gp = &grad[ch * oh * ow..(ch + 1) * oh * ow];
                    let dp = &mut delta[ch * h * w..(ch + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = gp[oy * ow + ox] * norm;
                            for ky in 0..*kernel {
                                let row = (oy * stride + ky) * w + ox * stride;
                                for kx in 0..*kernel {
                                    dp[row + kx] += g;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, &delta);
            }
            Op::MaxPool2d { a, kernel, stride } => {
                let s = self.shape(*a);
                let (c, h, w) = (s[0], s[1], s[2]);
                let os = self.shape(NodeId(i));
                let (oh, ow) = (os[1], os[2]);
                let src = self.data(*a);
                let out = self.data(NodeId(i));
                let mut delta = vec![0.0; c * h * w];
                for ch in 0..c {
                    let plane = &src[ch * h * w..(ch + 1) * h * w];
                    let dp = &mut delta[ch * h * w..(ch + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = grad[(ch * oh + oy) * ow + ox];
                            if g == 0.0 {
                                continue;
                            }
                            let best = out[(ch * oh + oy) * ow + ox];
                            'scan: for ky in 0..*kernel {
                                let base = (oy * stride + ky) * w + ox * stride;
                                for kx in 0..*kernel {
                                    if plane[base + kx] == best {
                                        dp[base + kx] += g;
                                        break 'scan;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, &delta);
            }
            Op::Reduce { op, a, axes } => {
                let shape = self.shape(*a).to_vec();
                let out_shape = self.shape(NodeId(i)).to_vec();
                let in_strides = strides_of(&shape);
                let out_strides = strides_of(&out_shape);
                let src = self.data(*a);
                let out = self.data(NodeId(i));
                let count: usize = axes.iter().map(|&ax| shape[ax]).product();
                let mut delta = vec![0.0; src.len()];
                match op {
                    ReduceOp::Sum => {
                        for (lin, d) in delta.iter_mut().enumerate() {
                            let o =
                                reduced_index(lin, &shape, &in_strides, &out_shape, &out_strides);
                            *d = grad[o];
                        }
                    }
                    ReduceOp::Mean => {
                        let inv = 1.0 / count as f64;
                        for (lin, d) in delta.iter_mut().enumerate() {
                            let o =
                                reduced_index(lin, &shape, &in_strides, &out_shape, &out_strides);
                            *d = grad[o] * inv;
                        }
                    }
                    ReduceOp::Max => {
                        // Route to the first element attaining the max.
                        let mut taken = vec![false; out.len()];
                        for (lin, &v) in src.iter().enumerate() {
                            let o =
                                reduced_index(lin, &shape, &in_strides, &out_shape, &out_strides);
                            if !taken[o] && v == out[o] {
                                taken[o] = true;
                                delta[lin] = grad[o];
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, &delta);
            }
            Op::Narrow { a, axis, start, len } => {
                let shape = self.shape(*a);
                let (outer, _, inner) = split_axis(shape, *axis);
                let mid = shape[*axis];
                let mut delta = vec![0.0; self.data(*a).len()];
                for o in 0..outer {
                    let dst = (o * mid + start) * inner;
                    let src = o * len * inner;
                    delta[dst..dst + len * inner].copy_from_slice(&grad[src..src + len * inner]);
                }
                self.accumulate(grads, *a, &delta);
            }
            Op::Concat { axis, parts } => {
                let out_shape = self.shape(NodeId(i));
                let (outer, _, inner) = split_axis(out_shape, *axis);
                let total = out_shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let mid = self.shape(p)[*axis];
                    if self.needs(p) {
                        let mut delta = vec![0.0; self.data(p).len()];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * mid * inner;
                            delta[dst..dst + mid * inner]
                                .copy_from_slice(&grad[src..src + mid * inner]);
                        }
                        self.accumulate(grads, p, &delta);
                    }
                    offset += mid;
                }
            }
            Op::Reshape { a } => self.accumulate(grads, *a, grad),
            Op::Warp { a, transform } => {
                let shape = self.shape(*a);
                let delta = crate::transforms::warp_adjoint(grad, shape, transform);
                self.accumulate(grads, *a, &delta);
            }
        }
    }

    fn backward_binary(
        &self,
        i: usize,
        op: BinOp,
        a: NodeId,
        b: NodeId,
        grad: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let out_shape = self.shape(NodeId(i)).to_vec();
        let same = self.shape(a) == self.shape(b);
        // Gradients in the broadcast output shape, then summed back down.
        let (da, db): (Option<Vec<f64>>, Option<Vec<f64>>) = match op {
            BinOp::Add => (
                self.needs(a).then(|| grad.to_vec()),
                self.needs(b).then(|| grad.to_vec()),
            ),
            BinOp::Sub => (
                self.needs(a).then(|| grad.to_vec()),
                self.needs(b).then(|| grad.iter().map(|&g| -g).collect()),
            ),
            BinOp::Mul | BinOp::Div => {
                let (ae, be) = if same {
                    (self.data(a).to_vec(), self.data(b).to_vec())
                } else {
                    (
                        expand_to(&self.nodes[a.0].value, &out_shape),
                        expand_to(&self.nodes[b.0].value, &out_shape),
                    )
                };
                match op {
                    BinOp::Mul => (
                        self.needs(a)
                            .then(|| grad.iter().zip(&be).map(|(&g, &y)| g * y).collect()),
                        self.needs(b)
                            .then(|| grad.iter().zip(&ae).map(|(&g, &x)| g * x).collect()),
                    ),
                    BinOp::Div => (
                        self.needs(a)
                            .then(|| grad.iter().zip(&be).map(|(&g, &y)| g / y).collect()),
                        self.needs(b).then(|| {
                            grad.iter()
                                .zip(ae.iter().zip(&be))
                                .map(|(&g, (&x, &y))| -g * x / (y * y))
                                .collect()
                        }),
                    ),
                    _ => unreachable!(),
                }
            }
        };
        if let Some(da) = da {
            let reduced = reduce_to_shape(&da, &out_shape, self.shape(a));
            self.accumulate(grads, a, &reduced);
        }
        if let Some(db) = db {
            let reduced = reduce_to_shape(&db, &out_shape, self.shape(b));
            self.accumulate(grads, b, &reduced);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv2d(
        &self,
        i: usize,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
        cols: &[f64],
        grad: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let si = self.shape(input);
        let sw = self.shape(weight);
        let so = self.shape(NodeId(i));
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let (c_out, k) = (sw[0], sw[2]);
        let (oh, ow) = (so[1], so[2]);
        let npix = oh * ow;
        let q = c_in * k * k;

        if self.needs(bias) {
            let mut db = vec![0.0; c_out];
            for (oc, slot) in db.iter_mut().enumerate() {
                *slot = grad[oc * npix..(oc + 1) * npix].iter().sum();
            }
            self.accumulate(grads, bias, &db);
        }

        if self.needs(weight) {
            let dw = mm_nt(grad, cols, c_out, npix, q);
            self.accumulate(grads, weight, &dw);
        }

        if self.needs(input) {
            // dcols = W^T grad, then scattered back through the im2col map.
            let dcols = mm_tn(self.data(weight), grad, c_out, q, npix);
            let mut dx = vec![0.0; c_in * h * w];
            for ci in 0..c_in {
                for ky in 0..k {
                    for kx in 0..k {
                        let qi = (ci * k + ky) * k + kx;
                        let row = &dcols[qi * npix..(qi + 1) * npix];
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dx[(ci * h + iy as usize) * w + ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
            self.accumulate(grads, input, &dx);
        }
    }
}

/// Minimum FLOP count before a kernel bothers with rayon. Kernels at this
/// scale are memory-bound, so only genuinely large products benefit.
const PAR_FLOP_THRESHOLD: usize = 8_000_000;

// ── shared kernels ──────────────────────────────────────────────────────
//
// All three GEMM variants are register-blocked four output rows at a time so
// the streamed operand is read once per block instead of once per row. Every
// output element still accumulates in a fixed sequential order.

/// Writes `rows of C_block += A_block * B` for up to four rows.
fn nn_block(block: &mut [f64], a_rows: &[f64], b: &[f64], k: usize, n: usize) {
    let rows = block.len() / n;
    match rows {
        4 => {
            let (r0, rest) = block.split_at_mut(n);
            let (r1, rest) = rest.split_at_mut(n);
            let (r2, r3) = rest.split_at_mut(n);
            for p in 0..k {
                let br = &b[p * n..(p + 1) * n];
                let (w0, w1) = (a_rows[p], a_rows[k + p]);
                let (w2, w3) = (a_rows[2 * k + p], a_rows[3 * k + p]);
                for ((o0, o1), ((o2, o3), &bv)) in r0
                    .iter_mut()
                    .zip(r1.iter_mut())
                    .zip(r2.iter_mut().zip(r3.iter_mut()).zip(br))
                {
                    *o0 += w0 * bv;
                    *o1 += w1 * bv;
                    *o2 += w2 * bv;
                    *o3 += w3 * bv;
                }
            }
        }
        _ => {
            for (i, row) in block.chunks_exact_mut(n).enumerate() {
                for p in 0..k {
                    let w = a_rows[i * k + p];
                    let br = &b[p * n..(p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(br) {
                        *o += w * bv;
                    }
                }
            }
        }
    }
}

/// C[m,n] = A[m,k] B[k,n]
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let run = |(bi, block): (usize, &mut [f64])| {
        let row0 = bi * 4;
        let rows = block.len() / n;
        nn_block(block, &a[row0 * k..(row0 + rows) * k], b, k, n);
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 4 {
        c.par_chunks_mut(4 * n).enumerate().for_each(run);
    } else {
        c.chunks_mut(4 * n).enumerate().for_each(run);
    }
    c
}

/// Four simultaneous dot-product rows of `C_block = A_block * B^T`.
fn nt_block(block: &mut [f64], a_rows: &[f64], b: &[f64], n: usize, k: usize) {
    let rows = block.len() / k;
    for j in 0..k {
        let br = &b[j * n..(j + 1) * n];
        match rows {
            4 => {
                let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
                let a0 = &a_rows[..n];
                let a1 = &a_rows[n..2 * n];
                let a2 = &a_rows[2 * n..3 * n];
                let a3 = &a_rows[3 * n..4 * n];
                for ((( &x0, &x1), (&x2, &x3)), &y) in
                    a0.iter().zip(a1).zip(a2.iter().zip(a3)).zip(br)
                {
                    s0 += x0 * y;
                    s1 += x1 * y;
                    s2 += x2 * y;
                    s3 += x3 * y;
                }
                block[j] = s0;
                block[k + j] = s1;
                block[2 * k + j] = s2;
                block[3 * k + j] = s3;
            }
            _ => {
                for i in 0..rows {
                    let ar = &a_rows[i * n..(i + 1) * n];
                    let mut acc = 0.0;
                    for (x, y) in ar.iter().zip(br) {
                        acc += x * y;
                    }
                    block[i * k + j] = acc;
                }
            }
        }
    }
}

/// C[m,k] = A[m,n] B[k,n]^T  (i.e. A · Bᵀ)
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    let run = |(bi, block): (usize, &mut [f64])| {
        let row0 = bi * 4;
        let rows = block.len() / k;
        nt_block(block, &a[row0 * n..(row0 + rows) * n], b, n, k);
    };
    if m * n * k >= PAR_FLOP_THRESHOLD && m > 4 {
        c.par_chunks_mut(4 * k).enumerate().for_each(run);
    } else {
        c.chunks_mut(4 * k).enumerate().for_each(run);
    }
    c
}

/// Rows `j0..j0+rows` of `C = A^T B`, streaming each B row once per block.
fn tn_block(block: &mut [f64], a: &[f64], b: &[f64], j0: usize, m: usize, k: usize, n: usize) {
    let rows = block.len() / n;
    match rows {
        4 => {
            let (r0, rest) = block.split_at_mut(n);
            let (r1, rest) = rest.split_at_mut(n);
            let (r2, r3) = rest.split_at_mut(n);
            for i in 0..m {
                let br = &b[i * n..(i + 1) * n];
                let (w0, w1) = (a[i * k + j0], a[i * k + j0 + 1]);
                let (w2, w3) = (a[i * k + j0 + 2], a[i * k + j0 + 3]);
                for ((o0, o1), ((o2, o3), &bv)) in r0
                    .iter_mut()
                    .zip(r1.iter_mut())
                    .zip(r2.iter_mut().zip(r3.iter_mut()).zip(br))
                {
                    *o0 += w0 * bv;
                    *o1 += w1 * bv;
                    *o2 += w2 * bv;
                    *o3 += w3 * bv;
                }
            }
        }
        _ => {
            for (dj, row) in block.chunks_exact_mut(n).enumerate() {
                let j = j0 + dj;
                for i in 0..m {
                    let w = a[i * k + j];
                    let br = &b[i * n..(i + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(br) {
                        *o += w * bv;
                    }
                }
            }
        }
    }
}

/// C[k,n] = A[m,k]^T B[m,n]  (i.e. Aᵀ · B)
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    let run = |(bi, block): (usize, &mut [f64])| {
        tn_block(block, a, b, bi * 4, m, k, n);
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && k > 4 {
        c.par_chunks_mut(4 * n).enumerate().for_each(run);
    } else {
        c.chunks_mut(4 * n).enumerate().for_each(run);
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let npix = oh * ow;
    let mut cols = vec![0.0; c_in * k * k * npix];
    for ci in 0..c_in {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let qi = (ci * k + ky) * k + kx;
                let row = &mut cols[qi * npix..(qi + 1) * npix];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    for (ox, slot) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *slot = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

// ── broadcasting helpers ────────────────────────────────────────────────

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}")));
        };
    }
    Ok(out)
}

fn pad_left(shape: &[usize], nd: usize) -> Vec<usize> {
    let mut out = vec![1; nd];
    out[nd - shape.len()..].copy_from_slice(shape);
    out
}

/// Expands `t` to `out_shape` by repeating broadcast axes.
fn expand_to(t: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    let nd = out_shape.len();
    let padded = pad_left(t.shape(), nd);
    let src_strides = strides_of(&padded);
    let n: usize = out_shape.iter().product();
    let mut out = vec![0.0; n];
    let data = t.data();
    let mut coords = vec![0usize; nd];
    for slot in out.iter_mut() {
        let mut flat = 0;
        for d in 0..nd {
            if padded[d] != 1 {
                flat += coords[d] * src_strides[d];
            }
        }
        *slot = data[flat];
        for d in (0..nd).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

fn broadcast_zip(a: &Tensor, b: &Tensor, out_shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let ae = expand_to(a, out_shape);
    let be = expand_to(b, out_shape);
    ae.into_iter().zip(be).map(|(x, y)| f(x, y)).collect()
}

/// Sums `grad` (laid out as `grad_shape`) down to `target_shape`.
fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let nd = grad_shape.len();
    let padded = pad_left(target_shape, nd);
    let tgt_strides = strides_of(&padded);
    let n: usize = target_shape.iter().product();
    let mut out = vec![0.0; n];
    let mut coords = vec![0usize; nd];
    for &g in grad {
        let mut flat = 0;
        for d in 0..nd {
            if padded[d] != 1 {
                flat += coords[d] * tgt_strides[d];
            }
        }
        out[flat] += g;
        for d in (0..nd).rev() {
            coords[d] += 1;
            if coords[d] < grad_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

/// Splits a shape at `axis` into (product before, extent at, product after).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn validate_axes(shape: &[usize], axes: &[usize]) -> Result<()> {
    if axes.is_empty() {
        return Err(Error::Precondition("reduction needs at least one axis".into()));
    }
    for (i, &ax) in axes.iter().enumerate() {
        if ax >= shape.len() {
            return Err(Error::Shape(format!("axis {ax} out of range for {shape:?}")));
        }
        if axes[..i].contains(&ax) {
            return Err(Error::Precondition(format!("duplicate reduction axis {ax}")));
        }
    }
    Ok(())
}

/// Output linear index for an input linear index under keep-dims reduction.
fn reduced_index(
    lin: usize,
    shape: &[usize],
    in_strides: &[usize],
    out_shape: &[usize],
    out_strides: &[usize],
) -> usize {
    let mut rem = lin;
    let mut o = 0;
    for d in 0..shape.len() {
        let coord = rem / in_strides[d];
        rem %= in_strides[d];
        if out_shape[d] != 1 {
            o += coord * out_strides[d];
        }
    }
    o
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        g.leaf(&Tensor::new(shape, data).unwrap().with_grad())
    }

    #[test]
    fn mul_matches_definition() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let b = g.constant(Tensor::from_vec(vec![4.0, 5.0, 6.0]));
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 10.0, 18.0]);
    }

    #[test]
    fn exp_identity_grad() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![0.0, 0.0]);
        let y = g.exp(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0]);
        let s = g.sum(y, &[0]).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn fanout_accumulates_exactly() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3], vec![1.0, -2.0, 0.5]);
        let y = g.add(x, x).unwrap();
        let s = g.sum(y, &[0]).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![2.0]);
        let y = g.square(x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Precondition(_))));
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let eye = g.constant(
            Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let x = g.constant(Tensor::new(vec![3, 2], (1..=6).map(f64::from).collect()).unwrap());
        let ix = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(ix).data(), g.value(x).data());

        let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap());
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 2]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![3.0; 5]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let z = g.constant(Tensor::from_vec(vec![1000.0, 0.0]));
        let s = g.softmax(z, 0).unwrap();
        let d = g.value(s).data();
        assert!(d[0] > 1.0 - 1e-12 && d[1] < 1e-12);
        assert!((d[0] + d[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap());
        let w = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 3]);
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv_constant_case() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![1, 5, 5], 1.0));
        let w = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 3]);
        for &v in g.value(y).data() {
            assert_eq!(v, 9.0);
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 2]));
        let w = g.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        let b = g.constant(Tensor::zeros(vec![1]));
        assert!(matches!(g.conv2d(x, w, b, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn avgpool_constant_and_impulse() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(vec![2, 4, 5], 3.25));
        let y = g.avgpool2d(c, 3, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 2, 3]);
        for &v in g.value(y).data() {
            assert!((v - 3.25).abs() < 1e-15);
        }
        let mut imp = Tensor::zeros(vec![1, 3, 3]);
        imp.set(&[0, 1, 1], 1.0);
        let i = g.constant(imp);
        let p = g.avgpool2d(i, 3, 1).unwrap();
        assert_eq!(g.value(p).shape(), &[1, 1, 1]);
        assert!((g.value(p).data()[0] - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn avgpool_rejects_small_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 5]));
        assert!(matches!(g.avgpool2d(x, 3, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn reduce_sum_and_max_tiebreak() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let s = g.sum(x, &[0]).unwrap();
        assert_eq!(g.value(s).data(), &[6.0]);

        let y = leaf(&mut g, vec![3], vec![2.0, 5.0, 5.0]);
        let m = g.max(y, &[0]).unwrap();
        assert_eq!(g.value(m).data(), &[5.0]);
        g.backward(m).unwrap();
        assert_eq!(g.grad(y).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn reduce_rejects_empty_and_bad_axes() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::zeros(vec![0, 3]));
        assert!(matches!(g.sum(e, &[0]), Err(Error::Numeric(_))));
        let x = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.sum(x, &[2]), Err(Error::Shape(_))));
        assert!(matches!(g.sum(x, &[0, 0]), Err(Error::Precondition(_))));
    }

    #[test]
    fn broadcasting_add_row_and_column() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 1], vec![10.0, 20.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 3]);
        assert_eq!(g.value(c).data(), &[11.0, 12.0, 13.0, 21.0, 22.0, 23.0]);
    }

    #[test]
    fn broadcast_gradient_sums_back() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2, 1], vec![1.0, 2.0]);
        let b = leaf(&mut g, vec![1, 3], vec![4.0, 5.0, 6.0]);
        let c = g.mul(a, b).unwrap();
        let s = g.sum(c, &[0, 1]).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[15.0, 15.0]);
        assert_eq!(g.grad(b).unwrap(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn incompatible_shapes_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 4]));
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn div_by_zero_and_log_domain() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0]));
        let z = g.constant(Tensor::from_vec(vec![0.0]));
        assert!(matches!(g.div(a, z), Err(Error::Numeric(_))));
        assert!(matches!(g.log(z), Err(Error::Numeric(_))));
    }

    #[test]
    fn narrow_and_concat_roundtrip() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let top = g.narrow(x, 0, 0, 1).unwrap();
        let rest = g.narrow(x, 0, 1, 2).unwrap();
        assert_eq!(g.value(top).data(), &[1.0, 2.0]);
        assert_eq!(g.value(rest).data(), &[3.0, 4.0, 5.0, 6.0]);
        let back = g.concat(&[top, rest], 0).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
        let s = g.sum(back, &[0, 1]).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn determinism_forward_backward() {
        let run = || {
            let mut g = Graph::new();
            let x = leaf(
                &mut g,
                vec![2, 8, 8],
                (0..128).map(|i| ((i * 37 % 19) as f64).sin()).collect(),
            );
            let w = leaf(&mut g, vec![3, 2, 3, 3], (0..54).map(|i| (i as f64 * 0.1).cos()).collect());
            let b = leaf(&mut g, vec![3], vec![0.1, -0.2, 0.3]);
            let y = g.conv2d(x, w, b, 1, 1).unwrap();
            let r = g.relu(y).unwrap();
            let s = g.sum(r, &[0, 1, 2]).unwrap();
            g.backward(s).unwrap();
            (
                g.value(s).data().to_vec(),
                g.grad(x).unwrap().to_vec(),
                g.grad(w).unwrap().to_vec(),
            )
        };
        let (s1, gx1, gw1) = run();
        let (s2, gx2, gw2) = run();
        assert_eq!(s1, s2);
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }
}
