//! A Wengert-list reverse-mode autodiff tape over flat `f32` buffers.
//!
//! Every value is a node in an append-only arena with its contents computed
//! eagerly at insertion. `backward` walks the list in reverse and *emits the
//! gradient computation as further tape nodes*, built from the same primitive
//! operations. A backward pass run with `create_graph = true` therefore
//! produces gradients that are themselves differentiable, which is exactly
//! what the gradient penalty term needs (a gradient norm inside a loss).
//!
//! The primitive set is deliberately closed under differentiation: e.g. the
//! input-gradient of a strided convolution is the transposed convolution,
//! whose own gradients are the forward convolution and the weight-gradient
//! kernel again.

use thiserror::Error;

use super::kernels;

/// Index of a value on the [`Tape`].
pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: contract violation: {detail}")]
    Contract { op: &'static str, detail: String },
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

fn contract_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::Contract { op, detail }
}

/// A plain tensor: shape, row-major data, and an optional gradient buffer
/// (filled in by training code after a backward pass).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, NumericsError> {
        if numel(&shape) != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {:?} wants {} elements, got {}", shape, numel(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor { shape, data: vec![0.0; n], grad: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f32),
    Sum(NodeId),
    Broadcast(NodeId),
    MatVec { m: NodeId, x: NodeId },
    MatVecT { m: NodeId, y: NodeId },
    Outer { u: NodeId, v: NodeId },
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    ConvInputGrad { g: NodeId, w: NodeId, stride: usize, pad: usize },
    ConvWeightGrad { x: NodeId, g: NodeId, stride: usize, pad: usize },
    BiasAdd { x: NodeId, b: NodeId },
    SpatialSum(NodeId),
    SpatialBroadcast { b: NodeId },
    Upsample { x: NodeId, factor: usize },
    BlockSum { x: NodeId, factor: usize },
    ConcatChannels(NodeId, NodeId),
    SliceChannels { x: NodeId, start: usize, len: usize },
    LeakyRelu { x: NodeId, alpha: f32 },
    /// `g * leaky_relu'(x)`; the slope mask is treated as locally constant.
    LeakyReluGradMul { g: NodeId, x: NodeId, alpha: f32 },
    Tanh(NodeId),
    Abs(NodeId),
    /// `g * sign(x)` with `sign(0) = 0`; the sign is treated as constant.
    SignMul { g: NodeId, x: NodeId },
    Sqrt(NodeId),
    Reshape(NodeId),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    op: Op,
}

/// Gradient nodes produced by [`Tape::backward`], keyed by the primal node.
pub struct Gradients {
    map: Vec<Option<NodeId>>,
}

impl Gradients {
    /// Gradient node of `loss` with respect to `id`, if any path required it.
    pub fn wrt(&self, id: NodeId) -> Option<NodeId> {
        self.map.get(id).copied().flatten()
    }
}

/// Outputs of [`Tape::gradient_penalty`].
pub struct PenaltyParts {
    /// `gamma * (|grad| - 1)^2`, a scalar node.
    pub penalty: NodeId,
    /// `|grad|`, the joint 2-norm of the critic's input gradients.
    pub grad_norm: NodeId,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// When true, newly pushed nodes never require grad (plain backward mode).
    freeze_grad: bool,
    /// Set once a non-recording backward has consumed the tape.
    finalized: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f32] {
        &self.nodes[id].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> f32 {
        debug_assert_eq!(self.nodes[id].data.len(), 1);
        self.nodes[id].data[0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    // ── Node construction ──────────────────────────────────────────────

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(numel(&shape), data.len());
        let rg = requires_grad && !self.freeze_grad;
        self.nodes.push(Node { shape, data, requires_grad: rg, op });
        self.nodes.len() - 1
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(
        &mut self,
        data: Vec<f32>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<NodeId, NumericsError> {
        if numel(&shape) != data.len() {
            return Err(shape_err(
                "leaf",
                format!("shape {:?} wants {} elements, got {}", shape, numel(&shape), data.len()),
            ));
        }
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    pub fn leaf_tensor(&mut self, t: &Tensor, requires_grad: bool) -> NodeId {
        self.push(t.shape.clone(), t.data.clone(), requires_grad, Op::Leaf)
    }

    /// A scalar constant (shape `[]`).
    pub fn scalar(&mut self, v: f32) -> NodeId {
        self.push(vec![], vec![v], false, Op::Leaf)
    }

    /// An all-zero constant of the given shape.
    pub fn zeros(&mut self, shape: Vec<usize>) -> NodeId {
        let n = numel(&shape);
        self.push(shape, vec![0.0; n], false, Op::Leaf)
    }

    // ── Elementwise and reduction ops ──────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), NumericsError> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.nodes[a].shape, self.nodes[b].shape),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(&self.nodes[a].data, &self.nodes[b].data, |x, y| x + y);
        Ok(self.push(self.nodes[a].shape.clone(), data, self.rg(&[a, b]), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_map(&self.nodes[a].data, &self.nodes[b].data, |x, y| x - y);
        Ok(self.push(self.nodes[a].shape.clone(), data, self.rg(&[a, b]), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(&self.nodes[a].data, &self.nodes[b].data, |x, y| x * y);
        Ok(self.push(self.nodes[a].shape.clone(), data, self.rg(&[a, b]), Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.check_same_shape("div", a, b)?;
        let data = zip_map(&self.nodes[a].data, &self.nodes[b].data, |x, y| x / y);
        Ok(self.push(self.nodes[a].shape.clone(), data, self.rg(&[a, b]), Op::Div(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let data = self.nodes[x].data.iter().map(|v| v * c).collect();
        self.push(self.nodes[x].shape.clone(), data, self.rg(&[x]), Op::Scale(x, c))
    }

    /// Fold a non-empty list with [`Tape::add`].
    pub fn add_many(&mut self, ids: &[NodeId]) -> Result<NodeId, NumericsError> {
        let (&first, rest) = ids
            .split_first()
            .ok_or_else(|| contract_err("add_many", "empty operand list".into()))?;
        let mut acc = first;
        for &id in rest {
            acc = self.add(acc, id)?;
        }
        Ok(acc)
    }

    /// Sum of all elements, as a scalar (shape `[]`). Accumulates in `f64`.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.nodes[x].data.iter().map(|&v| v as f64).sum();
        self.push(vec![], vec![total as f32], self.rg(&[x]), Op::Sum(x))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].data.len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f32)
    }

    /// Broadcast a scalar node to an arbitrary shape.
    pub fn broadcast(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, NumericsError> {
        if self.nodes[x].data.len() != 1 {
            return Err(shape_err("broadcast", format!("source must be scalar, got {:?}", self.nodes[x].shape)));
        }
        let v = self.nodes[x].data[0];
        let n = numel(&shape);
        Ok(self.push(shape, vec![v; n], self.rg(&[x]), Op::Broadcast(x)))
    }

    /// Mean absolute difference between two same-shaped tensors (a scalar).
    pub fn l1_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let d = self.sub(a, b)?;
        let m = self.abs(d);
        Ok(self.mean(m))
    }

    // ── Linear-algebra ops ─────────────────────────────────────────────

    fn mat_dims(&self, op: &'static str, m: NodeId) -> Result<(usize, usize), NumericsError> {
        match self.nodes[m].shape[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(shape_err(op, format!("matrix must be rank 2, got {s:?}"))),
        }
    }

    fn vec_dim(&self, op: &'static str, v: NodeId) -> Result<usize, NumericsError> {
        match self.nodes[v].shape[..] {
            [n] => Ok(n),
            ref s => Err(shape_err(op, format!("vector must be rank 1, got {s:?}"))),
        }
    }

    /// `[r, c] x [c] -> [r]`
    pub fn matvec(&mut self, m: NodeId, x: NodeId) -> Result<NodeId, NumericsError> {
        let (rows, cols) = self.mat_dims("matvec", m)?;
        let n = self.vec_dim("matvec", x)?;
        if n != cols {
            return Err(shape_err("matvec", format!("[{rows}, {cols}] x [{n}]")));
        }
        let mut out = vec![0.0; rows];
        kernels::matvec(&self.nodes[m].data, rows, cols, &self.nodes[x].data, &mut out);
        Ok(self.push(vec![rows], out, self.rg(&[m, x]), Op::MatVec { m, x }))
    }

    /// `[r, c]^T x [r] -> [c]`
    pub fn matvec_t(&mut self, m: NodeId, y: NodeId) -> Result<NodeId, NumericsError> {
        let (rows, cols) = self.mat_dims("matvec_t", m)?;
        let n = self.vec_dim("matvec_t", y)?;
        if n != rows {
            return Err(shape_err("matvec_t", format!("[{rows}, {cols}]^T x [{n}]")));
        }
        let mut out = vec![0.0; cols];
        kernels::matvec_t(&self.nodes[m].data, rows, cols, &self.nodes[y].data, &mut out);
        Ok(self.push(vec![cols], out, self.rg(&[m, y]), Op::MatVecT { m, y }))
    }

    /// `[r] x [c] -> [r, c]`
    pub fn outer(&mut self, u: NodeId, v: NodeId) -> Result<NodeId, NumericsError> {
        let r = self.vec_dim("outer", u)?;
        let c = self.vec_dim("outer", v)?;
        let mut out = vec![0.0; r * c];
        kernels::outer(&self.nodes[u].data, &self.nodes[v].data, &mut out);
        Ok(self.push(vec![r, c], out, self.rg(&[u, v]), Op::Outer { u, v }))
    }

    /// Fully-connected layer: `w x + b` with `w: [m, n]`, `x: [n]`, `b: [m]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let y = self.matvec(w, x)?;
        self.add(y, b)
    }

    // ── Convolution and spatial ops ────────────────────────────────────

    fn chw(&self, op: &'static str, x: NodeId) -> Result<(usize, usize, usize), NumericsError> {
        match self.nodes[x].shape[..] {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(shape_err(op, format!("expected [C, H, W], got {s:?}"))),
        }
    }

    fn conv_weight_dims(
        &self,
        op: &'static str,
        w: NodeId,
    ) -> Result<(usize, usize, usize), NumericsError> {
        match self.nodes[w].shape[..] {
            [co, ci, k, k2] if k == k2 => Ok((co, ci, k)),
            ref s => Err(shape_err(op, format!("expected [Co, Ci, k, k], got {s:?}"))),
        }
    }

    fn check_conv_args(
        op: &'static str,
        k: usize,
        h: usize,
        w: usize,
        stride: usize,
        pad: usize,
    ) -> Result<(), NumericsError> {
        if k % 2 == 0 {
            return Err(contract_err(op, format!("kernel size {k} must be odd")));
        }
        if !(stride == 1 || stride == 2) {
            return Err(contract_err(op, format!("stride {stride} not in {{1, 2}}")));
        }
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(contract_err(op, format!("kernel {k} exceeds padded input {h}x{w} (pad {pad})")));
        }
        Ok(())
    }

    /// Strided, zero-padded cross-correlation with optional channel bias.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, NumericsError> {
        let (ci, h, wid) = self.chw("conv2d", x)?;
        let (co, ciw, k) = self.conv_weight_dims("conv2d", w)?;
        if ci != ciw {
            return Err(shape_err("conv2d", format!("input has {ci} channels, weight expects {ciw}")));
        }
        Self::check_conv_args("conv2d", k, h, wid, stride, pad)?;
        let ho = kernels::out_dim(h, k, stride, pad);
        let wo = kernels::out_dim(wid, k, stride, pad);
        let mut out = vec![0.0; co * ho * wo];
        kernels::conv2d(
            &self.nodes[x].data, ci, h, wid,
            &self.nodes[w].data, co, k,
            stride, pad, &mut out, ho, wo,
        );
        let conv = self.push(vec![co, ho, wo], out, self.rg(&[x, w]), Op::Conv2d { x, w, stride, pad });
        match b {
            Some(b) => self.bias_add(conv, b),
            None => Ok(conv),
        }
    }

    /// Adjoint of [`Tape::conv2d`] w.r.t. its input (a transposed convolution).
    /// `(h, w)` is the spatial size of the input being reconstructed.
    pub fn conv2d_input_grad(
        &mut self,
        g: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        h: usize,
        wid: usize,
    ) -> Result<NodeId, NumericsError> {
        let (co, ho, wo) = self.chw("conv2d_input_grad", g)?;
        let (cow, ci, k) = self.conv_weight_dims("conv2d_input_grad", w)?;
        if co != cow {
            return Err(shape_err("conv2d_input_grad", format!("grad has {co} channels, weight {cow}")));
        }
        Self::check_conv_args("conv2d_input_grad", k, h, wid, stride, pad)?;
        if ho != kernels::out_dim(h, k, stride, pad) || wo != kernels::out_dim(wid, k, stride, pad) {
            return Err(shape_err(
                "conv2d_input_grad",
                format!("grad {ho}x{wo} inconsistent with input {h}x{wid}"),
            ));
        }
        let mut out = vec![0.0; ci * h * wid];
        kernels::conv2d_input_grad(
            &self.nodes[g].data, co, ho, wo,
            &self.nodes[w].data, ci, k,
            stride, pad, &mut out, h, wid,
        );
        Ok(self.push(vec![ci, h, wid], out, self.rg(&[g, w]), Op::ConvInputGrad { g, w, stride, pad }))
    }

    /// Adjoint of [`Tape::conv2d`] w.r.t. its weight.
    pub fn conv2d_weight_grad(
        &mut self,
        x: NodeId,
        g: NodeId,
        stride: usize,
        pad: usize,
        k: usize,
    ) -> Result<NodeId, NumericsError> {
        let (ci, h, wid) = self.chw("conv2d_weight_grad", x)?;
        let (co, ho, wo) = self.chw("conv2d_weight_grad", g)?;
        Self::check_conv_args("conv2d_weight_grad", k, h, wid, stride, pad)?;
        if ho != kernels::out_dim(h, k, stride, pad) || wo != kernels::out_dim(wid, k, stride, pad) {
            return Err(shape_err(
                "conv2d_weight_grad",
                format!("grad {ho}x{wo} inconsistent with input {h}x{wid}"),
            ));
        }
        let mut out = vec![0.0; co * ci * k * k];
        kernels::conv2d_weight_grad(
            &self.nodes[x].data, ci, h, wid,
            &self.nodes[g].data, co, ho, wo,
            stride, pad, k, &mut out,
        );
        Ok(self.push(
            vec![co, ci, k, k],
            out,
            self.rg(&[x, g]),
            Op::ConvWeightGrad { x, g, stride, pad },
        ))
    }

    /// Add a per-channel bias `[c]` to a `[c, h, w]` tensor.
    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (c, h, w) = self.chw("bias_add", x)?;
        let n = self.vec_dim("bias_add", b)?;
        if n != c {
            return Err(shape_err("bias_add", format!("{c} channels vs {n} biases")));
        }
        let mut data = self.nodes[x].data.clone();
        for ch in 0..c {
            let bv = self.nodes[b].data[ch];
            for v in &mut data[ch * h * w..(ch + 1) * h * w] {
                *v += bv;
            }
        }
        Ok(self.push(vec![c, h, w], data, self.rg(&[x, b]), Op::BiasAdd { x, b }))
    }

    /// Sum a `[c, h, w]` tensor over its spatial extent, yielding `[c]`.
    pub fn spatial_sum(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let (c, h, w) = self.chw("spatial_sum", x)?;
        let mut out = vec![0.0f32; c];
        for ch in 0..c {
            let s: f64 = self.nodes[x].data[ch * h * w..(ch + 1) * h * w]
                .iter()
                .map(|&v| v as f64)
                .sum();
            out[ch] = s as f32;
        }
        Ok(self.push(vec![c], out, self.rg(&[x]), Op::SpatialSum(x)))
    }

    /// Broadcast a `[c]` vector over an `h x w` spatial extent.
    pub fn spatial_broadcast(&mut self, b: NodeId, h: usize, w: usize) -> Result<NodeId, NumericsError> {
        let c = self.vec_dim("spatial_broadcast", b)?;
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            out[ch * h * w..(ch + 1) * h * w].fill(self.nodes[b].data[ch]);
        }
        Ok(self.push(vec![c, h, w], out, self.rg(&[b]), Op::SpatialBroadcast { b }))
    }

    /// Nearest-neighbour upsampling of `[c, h, w]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId, NumericsError> {
        let (c, h, w) = self.chw("upsample_nearest", x)?;
        if factor == 0 {
            return Err(contract_err("upsample_nearest", "factor must be positive".into()));
        }
        let mut out = vec![0.0; c * h * factor * w * factor];
        kernels::upsample_nearest(&self.nodes[x].data, c, h, w, factor, &mut out);
        Ok(self.push(
            vec![c, h * factor, w * factor],
            out,
            self.rg(&[x]),
            Op::Upsample { x, factor },
        ))
    }

    /// Sum over `factor x factor` blocks; adjoint of [`Tape::upsample_nearest`].
    pub fn block_sum(&mut self, x: NodeId, factor: usize) -> Result<NodeId, NumericsError> {
        let (c, h, w) = self.chw("block_sum", x)?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(contract_err(
                "block_sum",
                format!("factor {factor} must divide spatial dims {h}x{w}"),
            ));
        }
        let mut out = vec![0.0; c * (h / factor) * (w / factor)];
        kernels::block_sum(&self.nodes[x].data, c, h, w, factor, &mut out);
        Ok(self.push(
            vec![c, h / factor, w / factor],
            out,
            self.rg(&[x]),
            Op::BlockSum { x, factor },
        ))
    }

    /// Concatenate two tensors along their leading (channel) axis. Trailing
    /// dimensions must agree.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.is_empty() || sb.is_empty() || sa[1..] != sb[1..] {
            return Err(shape_err("concat_channels", format!("{sa:?} vs {sb:?}")));
        }
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let mut data = Vec::with_capacity(numel(&shape));
        data.extend_from_slice(&self.nodes[a].data);
        data.extend_from_slice(&self.nodes[b].data);
        Ok(self.push(shape, data, self.rg(&[a, b]), Op::ConcatChannels(a, b)))
    }

    /// Fold a non-empty list with [`Tape::concat_channels`].
    pub fn concat_many(&mut self, ids: &[NodeId]) -> Result<NodeId, NumericsError> {
        let (&first, rest) = ids
            .split_first()
            .ok_or_else(|| contract_err("concat_many", "empty operand list".into()))?;
        let mut acc = first;
        for &id in rest {
            acc = self.concat_channels(acc, id)?;
        }
        Ok(acc)
    }

    /// Take `len` slots starting at `start` along the leading axis.
    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NumericsError> {
        let s = &self.nodes[x].shape;
        if s.is_empty() || start + len > s[0] || len == 0 {
            return Err(shape_err(
                "slice_channels",
                format!("slice {start}..{} of shape {s:?}", start + len),
            ));
        }
        let block: usize = s[1..].iter().product();
        let mut shape = s.clone();
        shape[0] = len;
        let data = self.nodes[x].data[start * block..(start + len) * block].to_vec();
        Ok(self.push(shape, data, self.rg(&[x]), Op::SliceChannels { x, start, len }))
    }

    /// View the same elements under a different shape.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, NumericsError> {
        if numel(&shape) != self.nodes[x].data.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} ({} elements) -> {:?}", self.nodes[x].shape, self.nodes[x].data.len(), shape),
            ));
        }
        let data = self.nodes[x].data.clone();
        Ok(self.push(shape, data, self.rg(&[x]), Op::Reshape(x)))
    }

    // ── Nonlinearities ─────────────────────────────────────────────────

    /// `max(x, alpha * x)`; the derivative at exactly 0 is taken as 1.
    pub fn leaky_relu(&mut self, x: NodeId, alpha: f32) -> NodeId {
        let data = self.nodes[x].data.iter().map(|&v| if v >= 0.0 { v } else { alpha * v }).collect();
        self.push(self.nodes[x].shape.clone(), data, self.rg(&[x]), Op::LeakyRelu { x, alpha })
    }

    fn leaky_relu_grad_mul(&mut self, g: NodeId, x: NodeId, alpha: f32) -> NodeId {
        let data = zip_map(&self.nodes[g].data, &self.nodes[x].data, |gv, xv| {
            if xv >= 0.0 {
                gv
            } else {
                alpha * gv
            }
        });
        self.push(self.nodes[g].shape.clone(), data, self.rg(&[g]), Op::LeakyReluGradMul { g, x, alpha })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x].data.iter().map(|v| v.tanh()).collect();
        self.push(self.nodes[x].shape.clone(), data, self.rg(&[x]), Op::Tanh(x))
    }

    /// `|x|`, with subgradient 0 at exactly 0.
    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x].data.iter().map(|v| v.abs()).collect();
        self.push(self.nodes[x].shape.clone(), data, self.rg(&[x]), Op::Abs(x))
    }

    fn sign_mul(&mut self, g: NodeId, x: NodeId) -> NodeId {
        let data = zip_map(&self.nodes[g].data, &self.nodes[x].data, |gv, xv| {
            if xv > 0.0 {
                gv
            } else if xv < 0.0 {
                -gv
            } else {
                0.0
            }
        });
        self.push(self.nodes[g].shape.clone(), data, self.rg(&[g]), Op::SignMul { g, x })
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x].data.iter().map(|v| v.sqrt()).collect();
        self.push(self.nodes[x].shape.clone(), data, self.rg(&[x]), Op::Sqrt(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        // mul(x, x) keeps the op set small and differentiates for free.
        self.mul(x, x).expect("square: identical shapes")
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. With `create_graph = false` the
    /// emitted gradient nodes are detached (cheap, final); with `true` they
    /// remain differentiable so a gradient norm can be penalized. A tape can
    /// run any number of recording backwards but only one detached one.
    pub fn backward(&mut self, loss: NodeId, create_graph: bool) -> Result<Gradients, NumericsError> {
        if self.nodes[loss].data.len() != 1 {
            return Err(contract_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss].shape),
            ));
        }
        if self.finalized {
            return Err(contract_err(
                "backward",
                "tape already consumed by a non-recording backward; build a fresh tape".into(),
            ));
        }
        if !create_graph {
            self.finalized = true;
            self.freeze_grad = true;
        }

        let mut map: Vec<Option<NodeId>> = vec![None; loss + 1];
        let seed_shape = self.nodes[loss].shape.clone();
        let seed = self.push(seed_shape, vec![1.0], false, Op::Leaf);
        map[loss] = Some(seed);

        for id in (0..=loss).rev() {
            let Some(gout) = map[id] else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            self.emit_vjps(id, gout, &op, &mut map);
        }

        self.freeze_grad = false;
        Ok(Gradients { map })
    }

    fn accumulate(&mut self, map: &mut [Option<NodeId>], input: NodeId, part: NodeId) {
        if !self.nodes[input].requires_grad {
            return;
        }
        map[input] = Some(match map[input] {
            None => part,
            Some(prev) => self.add(prev, part).expect("gradient accumulation shapes"),
        });
    }

    fn emit_vjps(&mut self, out: NodeId, gout: NodeId, op: &Op, map: &mut [Option<NodeId>]) {
        let vjp = "vjp construction";
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(map, a, gout);
                self.accumulate(map, b, gout);
            }
            Op::Sub(a, b) => {
                self.accumulate(map, a, gout);
                if self.nodes[b].requires_grad {
                    let neg = self.scale(gout, -1.0);
                    self.accumulate(map, b, neg);
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a].requires_grad {
                    let ga = self.mul(gout, b).expect(vjp);
                    self.accumulate(map, a, ga);
                }
                if self.nodes[b].requires_grad {
                    let gb = self.mul(gout, a).expect(vjp);
                    self.accumulate(map, b, gb);
                }
            }
            Op::Div(a, b) => {
                if self.nodes[a].requires_grad {
                    let ga = self.div(gout, b).expect(vjp);
                    self.accumulate(map, a, ga);
                }
                if self.nodes[b].requires_grad {
                    let gz = self.mul(gout, out).expect(vjp);
                    let q = self.div(gz, b).expect(vjp);
                    let gb = self.scale(q, -1.0);
                    self.accumulate(map, b, gb);
                }
            }
            Op::Scale(x, c) => {
                let gx = self.scale(gout, c);
                self.accumulate(map, x, gx);
            }
            Op::Sum(x) => {
                let shape = self.nodes[x].shape.clone();
                let gx = self.broadcast(gout, shape).expect(vjp);
                self.accumulate(map, x, gx);
            }
            Op::Broadcast(x) => {
                let gx = self.sum(gout);
                self.accumulate(map, x, gx);
            }
            Op::MatVec { m, x } => {
                if self.nodes[m].requires_grad {
                    let gm = self.outer(gout, x).expect(vjp);
                    self.accumulate(map, m, gm);
                }
                if self.nodes[x].requires_grad {
                    let gx = self.matvec_t(m, gout).expect(vjp);
                    self.accumulate(map, x, gx);
                }
            }
            Op::MatVecT { m, y } => {
                if self.nodes[m].requires_grad {
                    let gm = self.outer(y, gout).expect(vjp);
                    self.accumulate(map, m, gm);
                }
                if self.nodes[y].requires_grad {
                    let gy = self.matvec(m, gout).expect(vjp);
                    self.accumulate(map, y, gy);
                }
            }
            Op::Outer { u, v } => {
                if self.nodes[u].requires_grad {
                    let gu = self.matvec(gout, v).expect(vjp);
                    self.accumulate(map, u, gu);
                }
                if self.nodes[v].requires_grad {
                    let gv = self.matvec_t(gout, u).expect(vjp);
                    self.accumulate(map, v, gv);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                if self.nodes[x].requires_grad {
                    let (_, h, wid) = self.chw("vjp", x).expect(vjp);
                    let gx = self.conv2d_input_grad(gout, w, stride, pad, h, wid).expect(vjp);
                    self.accumulate(map, x, gx);
                }
                if self.nodes[w].requires_grad {
                    let k = self.nodes[w].shape[2];
                    let gw = self.conv2d_weight_grad(x, gout, stride, pad, k).expect(vjp);
                    self.accumulate(map, w, gw);
                }
            }
            Op::ConvInputGrad { g, w, stride, pad } => {
                if self.nodes[g].requires_grad {
                    let gg = self.conv2d(gout, w, None, stride, pad).expect(vjp);
                    self.accumulate(map, g, gg);
                }
                if self.nodes[w].requires_grad {
                    let k = self.nodes[w].shape[2];
                    let gw = self.conv2d_weight_grad(gout, g, stride, pad, k).expect(vjp);
                    self.accumulate(map, w, gw);
                }
            }
            Op::ConvWeightGrad { x, g, stride, pad } => {
                if self.nodes[x].requires_grad {
                    let (_, h, wid) = self.chw("vjp", x).expect(vjp);
                    let gx = self.conv2d_input_grad(g, gout, stride, pad, h, wid).expect(vjp);
                    self.accumulate(map, x, gx);
                }
                if self.nodes[g].requires_grad {
                    let gg = self.conv2d(x, gout, None, stride, pad).expect(vjp);
                    self.accumulate(map, g, gg);
                }
            }
            Op::BiasAdd { x, b } => {
                self.accumulate(map, x, gout);
                if self.nodes[b].requires_grad {
                    let gb = self.spatial_sum(gout).expect(vjp);
                    self.accumulate(map, b, gb);
                }
            }
            Op::SpatialSum(x) => {
                let (_, h, w) = self.chw("vjp", x).expect(vjp);
                let gx = self.spatial_broadcast(gout, h, w).expect(vjp);
                self.accumulate(map, x, gx);
            }
            Op::SpatialBroadcast { b, .. } => {
                let gb = self.spatial_sum(gout).expect(vjp);
                self.accumulate(map, b, gb);
            }
            Op::Upsample { x, factor } => {
                let gx = self.block_sum(gout, factor).expect(vjp);
                self.accumulate(map, x, gx);
            }
            Op::BlockSum { x, factor } => {
                let gx = self.upsample_nearest(gout, factor).expect(vjp);
                self.accumulate(map, x, gx);
            }
            Op::ConcatChannels(a, b) => {
                let ca = self.nodes[a].shape[0];
                let cb = self.nodes[b].shape[0];
                if self.nodes[a].requires_grad {
                    let ga = self.slice_channels(gout, 0, ca).expect(vjp);
                    self.accumulate(map, a, ga);
                }
                if self.nodes[b].requires_grad {
                    let gb = self.slice_channels(gout, ca, cb).expect(vjp);
                    self.accumulate(map, b, gb);
                }
            }
            Op::SliceChannels { x, start, len } => {
                let shape = self.nodes[x].shape.clone();
                let total = shape[0];
                let mut parts = Vec::with_capacity(3);
                if start > 0 {
                    let mut s = shape.clone();
                    s[0] = start;
                    parts.push(self.zeros(s));
                }
                parts.push(gout);
                if start + len < total {
                    let mut s = shape.clone();
                    s[0] = total - start - len;
                    parts.push(self.zeros(s));
                }
                let gx = self.concat_many(&parts).expect(vjp);
                self.accumulate(map, x, gx);
            }
            Op::LeakyRelu { x, alpha } => {
                let gx = self.leaky_relu_grad_mul(gout, x, alpha);
                self.accumulate(map, x, gx);
            }
            Op::LeakyReluGradMul { g, x, alpha } => {
                // The slope mask is piecewise constant: no gradient toward x.
                if self.nodes[g].requires_grad {
                    let gg = self.leaky_relu_grad_mul(gout, x, alpha);
                    self.accumulate(map, g, gg);
                }
            }
            Op::Tanh(x) => {
                let y2 = self.mul(out, out).expect(vjp);
                let gy2 = self.mul(gout, y2).expect(vjp);
                let gx = self.sub(gout, gy2).expect(vjp);
                self.accumulate(map, x, gx);
            }
            Op::Abs(x) => {
                let gx = self.sign_mul(gout, x);
                self.accumulate(map, x, gx);
            }
            Op::SignMul { g, x } => {
                if self.nodes[g].requires_grad {
                    let gg = self.sign_mul(gout, x);
                    self.accumulate(map, g, gg);
                }
            }
            Op::Sqrt(x) => {
                let half = self.scale(gout, 0.5);
                let gx = self.div(half, out).expect(vjp);
                self.accumulate(map, x, gx);
            }
            Op::Reshape(x) => {
                let shape = self.nodes[x].shape.clone();
                let gx = self.reshape(gout, shape).expect(vjp);
                self.accumulate(map, x, gx);
            }
        }
    }

    // ── Gradient penalty ───────────────────────────────────────────────

    /// WGAN-style gradient penalty: interpolates `real` and `fake` component
    /// tensors at `epsilon` (one shared draw), evaluates `critic` on the
    /// interpolates, and returns `gamma * (|grad| - 1)^2` where `|grad|` is
    /// the joint 2-norm of the critic's gradients w.r.t. every interpolate.
    ///
    /// The interpolates are materialized as fresh differentiable leaves and
    /// the inner backward pass is recorded, so the returned penalty node can
    /// itself be differentiated w.r.t. the critic's parameters.
    pub fn gradient_penalty<F>(
        &mut self,
        real: &[NodeId],
        fake: &[NodeId],
        epsilon: f32,
        gamma: f32,
        critic: F,
    ) -> Result<PenaltyParts, NumericsError>
    where
        F: FnOnce(&mut Tape, &[NodeId]) -> Result<NodeId, NumericsError>,
    {
        if real.len() != fake.len() || real.is_empty() {
            return Err(contract_err(
                "gradient_penalty",
                format!("component lists must be equal and non-empty: {} vs {}", real.len(), fake.len()),
            ));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(contract_err("gradient_penalty", format!("epsilon {epsilon} outside [0, 1]")));
        }
        let mut interp = Vec::with_capacity(real.len());
        for (&r, &f) in real.iter().zip(fake) {
            self.check_same_shape("gradient_penalty", r, f)?;
            let data = zip_map(&self.nodes[r].data, &self.nodes[f].data, |rv, fv| {
                epsilon * rv + (1.0 - epsilon) * fv
            });
            let shape = self.nodes[r].shape.clone();
            let leaf = self.leaf(data, shape, true)?;
            interp.push(leaf);
        }

        let score = critic(self, &interp)?;
        if self.nodes[score].data.len() != 1 {
            return Err(contract_err(
                "gradient_penalty",
                format!("critic output must be scalar, got {:?}", self.nodes[score].shape),
            ));
        }
        let grads = self.backward(score, true)?;

        let mut sq_terms = Vec::with_capacity(interp.len());
        for &x in &interp {
            match grads.wrt(x) {
                Some(g) => {
                    let s = self.square(g);
                    sq_terms.push(self.sum(s));
                }
                None => {
                    // The critic ignored this input entirely: zero gradient.
                    sq_terms.push(self.scalar(0.0));
                }
            }
        }
        let total = self.add_many(&sq_terms)?;
        let grad_norm = self.sqrt(total);
        let one = self.scalar(1.0);
        let excess = self.sub(grad_norm, one)?;
        let sq = self.square(excess);
        let penalty = self.scale(sq, gamma);
        Ok(PenaltyParts { penalty, grad_norm })
    }
}

fn zip_map(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
