//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order. `backward` sweeps
//! the tape from the newest node to the oldest, so a node's gradient is
//! complete before it is propagated. When several consumers feed one node,
//! their contributions are summed in reverse creation order; the first
//! contribution is moved in rather than added to zeros.

pub mod kernels;

use std::collections::BTreeSet;

use thiserror::Error;

use crate::tensor::Tensor;
use kernels::ConvGeom;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutogradError {
    #[error("shape error at {node}: {detail}")]
    Shape { node: String, detail: String },
    #[error("non-finite value produced by {node}")]
    NonFinite { node: String },
    #[error("backward already ran on this tape")]
    TapeConsumed,
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("seed for node {node} has {actual} values, expected {expected}")]
    SeedLength {
        node: usize,
        expected: usize,
        actual: usize,
    },
}

pub type Result<T> = std::result::Result<T, AutogradError>;

/// Provenance label carried by every leaf of the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LeafTag {
    /// θ_g
    Generator,
    /// θ_d
    Discriminator,
    /// θ_q
    QHead,
    /// Generator input built from z and c.
    Latent,
    /// Code targets (one-hot and continuous values).
    Code,
    /// Images from the training set.
    RealImage,
    /// Detached generator output.
    Generated,
    /// Tensor that arrived over the Q-service boundary.
    Received,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which examples share normalization statistics in a batch-norm layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormGroup {
    /// Statistics over the whole batch (and spatial positions).
    Batch,
    /// Each example normalized by its own statistics over spatial positions.
    PerExample,
}

#[derive(Debug, Clone)]
struct BnSaved {
    x_hat: Vec<f64>,
    /// inverse standard deviation, `[group][channel]`
    inv_std: Vec<f64>,
    groups: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(LeafTag),
    Reshape(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    LogSoftmax(NodeId),
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: BnSaved,
    },
    /// Affine normalization with frozen statistics (inference-mode batch norm).
    BatchNormFrozen {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Square(_) => "square",
            Op::Clamp(..) => "clamp",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::BatchNormFrozen { .. } => "batch_norm_frozen",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf(_) => vec![],
            Op::Reshape(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Square(a)
            | Op::Clamp(a, ..)
            | Op::LogSoftmax(a) => vec![*a],
            Op::SliceCols { x, .. } => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::ConcatCols(parts) => parts.clone(),
            Op::Dense { x, w, b }
            | Op::Conv2d { x, w, b, .. }
            | Op::ConvTranspose2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::BatchNorm { x, gamma, beta, .. } | Op::BatchNormFrozen { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics observed by a training-mode batch-norm node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Side of every breakpoint for each relu, leaky_relu and clamp input,
    /// in creation order. Two evaluations of the same tape are on one smooth
    /// piece when their patterns are equal.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match n.op {
                Op::Relu(a) | Op::LeakyRelu(a, _) => {
                    out.extend(self.value(a).data().iter().map(|v| *v > 0.0));
                }
                Op::Clamp(a, lo, hi) => {
                    for v in self.value(a).data() {
                        out.push(*v < lo);
                        out.push(*v > hi);
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, tag: LeafTag, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf(tag),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, LeafTag::Constant, false)
    }

    fn label(&self, op: &Op) -> String {
        format!("{}#{}", op.name(), self.nodes.len())
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(AutogradError::NonFinite {
                node: self.label(&op),
            });
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn shape_err(&self, op: &str, detail: String) -> AutogradError {
        AutogradError::Shape {
            node: format!("{op}#{}", self.nodes.len()),
            detail,
        }
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(op, value)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(self.shape_err(
                op.name(),
                format!("operands {:?} and {:?} differ", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(op, value)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.nodes[a.0].value.clone();
        let from = v.shape().to_vec();
        let value = v
            .reshape(shape.clone())
            .map_err(|_| self.shape_err("reshape", format!("{from:?} -> {shape:?}")))?;
        self.push(Op::Reshape(a), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.unary(a, Op::Scale(a, k), |v| v * k)
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.unary(a, Op::AddScalar(a), |v| v + k)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Relu(a), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.unary(a, Op::LeakyRelu(a, slope), |v| if v > 0.0 { v } else { v * slope })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Square(a), |v| v * v)
    }

    /// Elementwise clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.unary(a, Op::Clamp(a, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Columns `[start, start + len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        if v.rank() != 2 || len == 0 || start + len > v.shape()[1] {
            return Err(self.shape_err(
                "slice_cols",
                format!("columns {start}..{} of {:?}", start + len, v.shape()),
            ));
        }
        let (rows, cols) = (v.shape()[0], v.shape()[1]);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], data).expect("slice shape");
        self.push(Op::SliceCols { x, start }, value)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(self.shape_err("concat_cols", "no operands".into()));
        }
        let rows = self.nodes[parts[0].0].value.shape().first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != 2 || s[0] != rows {
                return Err(self.shape_err(
                    "concat_cols",
                    format!("operand {s:?} is not [{rows}, _]"),
                ));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], data).expect("concat shape");
        self.push(Op::ConcatCols(parts.to_vec()), value)
    }

    /// Row-wise log-softmax of a rank-2 tensor.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        if v.rank() != 2 {
            return Err(self.shape_err("log_softmax", format!("expected rank 2, got {:?}", v.shape())));
        }
        let (rows, cols) = (v.shape()[0], v.shape()[1]);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &v.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&a| (a - max).exp()).sum::<f64>().ln();
            for c in 0..cols {
                data[r * cols + c] = row[c] - lse;
            }
        }
        let value = Tensor::new(vec![rows, cols], data).expect("same shape");
        self.push(Op::LogSoftmax(x), value)
    }

    /// Fully connected layer. `x` is `[batch, in]`, `w` is `[out, in]`, `b` is `[out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.nodes[x.0].value.shape().to_vec(),
            self.nodes[w.0].value.shape().to_vec(),
            self.nodes[b.0].value.shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(self.shape_err(
                "dense",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (batch, inp, outp) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; batch * outp];
        kernels::dense_forward(
            batch,
            inp,
            outp,
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
            &mut y,
        );
        let value = Tensor::new(vec![batch, outp], y).expect("dense shape");
        self.push(Op::Dense { x, w, b }, value)
    }

    fn conv_geom(
        &self,
        op: &str,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        transposed: bool,
    ) -> Result<ConvGeom> {
        let (xs, ws, bs) = (
            self.nodes[x.0].value.shape(),
            self.nodes[w.0].value.shape(),
            self.nodes[b.0].value.shape(),
        );
        let breakdown = || {
            format!("input {xs:?}, weight {ws:?}, bias {bs:?}, stride {stride}, padding {pad}")
        };
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(self.shape_err(op, breakdown()));
        }
        let (in_ch, out_ch) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
        if xs[1] != in_ch || bs[0] != out_ch {
            return Err(self.shape_err(op, breakdown()));
        }
        let extent = |i, k| {
            if transposed {
                kernels::conv_transpose_out_extent(i, k, stride, pad)
            } else {
                kernels::conv_out_extent(i, k, stride, pad)
            }
        };
        match (extent(xs[2], ws[2]), extent(xs[3], ws[3])) {
            (Some(out_h), Some(out_w)) => Ok(ConvGeom {
                batch: xs[0],
                in_channels: in_ch,
                in_h: xs[2],
                in_w: xs[3],
                out_channels: out_ch,
                kernel_h: ws[2],
                kernel_w: ws[3],
                stride,
                pad,
                out_h,
                out_w,
            }),
            _ => Err(self.shape_err(
                op,
                format!("{} gives a non-integral output size", breakdown()),
            )),
        }
    }

    /// Cross-correlation over NCHW input with `[out, in, kh, kw]` weights.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let geom = self.conv_geom("conv2d", x, w, b, stride, pad, false)?;
        let mut out = vec![0.0; geom.batch * geom.out_channels * geom.out_h * geom.out_w];
        kernels::conv2d_forward(
            &geom,
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
            &mut out,
        );
        let value = Tensor::new(
            vec![geom.batch, geom.out_channels, geom.out_h, geom.out_w],
            out,
        )
        .expect("conv shape");
        self.push(Op::Conv2d { x, w, b, geom }, value)
    }

    /// Fractionally-strided convolution with `[in, out, kh, kw]` weights.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let geom = self.conv_geom("conv_transpose2d", x, w, b, stride, pad, true)?;
        let mut out = vec![0.0; geom.batch * geom.out_channels * geom.out_h * geom.out_w];
        kernels::conv_transpose2d_forward(
            &geom,
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
            &mut out,
        );
        let value = Tensor::new(
            vec![geom.batch, geom.out_channels, geom.out_h, geom.out_w],
            out,
        )
        .expect("conv shape");
        self.push(Op::ConvTranspose2d { x, w, b, geom }, value)
    }

    fn bn_dims(&self, op: &str, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<(usize, usize, usize)> {
        let xs = self.nodes[x.0].value.shape();
        let (batch, channels, spatial) = match xs.len() {
            2 => (xs[0], xs[1], 1),
            4 => (xs[0], xs[1], xs[2] * xs[3]),
            _ => return Err(self.shape_err(op, format!("input {xs:?} must be rank 2 or 4"))),
        };
        for p in [gamma, beta] {
            if self.nodes[p.0].value.shape() != [channels] {
                return Err(self.shape_err(
                    op,
                    format!(
                        "affine parameter {:?} does not match {channels} channels",
                        self.nodes[p.0].value.shape()
                    ),
                ));
            }
        }
        Ok((batch, channels, spatial))
    }

    /// Training-mode batch normalization. Returns the output node and the
    /// statistics seen (averaged over groups for [`NormGroup::PerExample`]).
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        group: NormGroup,
    ) -> Result<(NodeId, BatchStats)> {
        let (batch, channels, spatial) = self.bn_dims("batch_norm", x, gamma, beta)?;
        let (groups, per_group) = match group {
            NormGroup::Batch => (1, batch),
            NormGroup::PerExample => (batch, 1),
        };
        let count = per_group * spatial;
        if group == NormGroup::Batch && count < 2 {
            return Err(self.shape_err(
                "batch_norm",
                format!("batch statistics need at least 2 values per channel, input {:?}", self.nodes[x.0].value.shape()),
            ));
        }
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();
        let mut y = vec![0.0; xv.len()];
        let mut x_hat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; groups * channels];
        let mut stats = BatchStats {
            mean: vec![0.0; channels],
            var: vec![0.0; channels],
        };
        for gi in 0..groups {
            for c in 0..channels {
                let idx = |n: usize, s: usize| ((gi * per_group + n) * channels + c) * spatial + s;
                let mut sum = 0.0;
                for n in 0..per_group {
                    for s in 0..spatial {
                        sum += xv[idx(n, s)];
                    }
                }
                let mean = sum / count as f64;
                let mut sq = 0.0;
                for n in 0..per_group {
                    for s in 0..spatial {
                        let d = xv[idx(n, s)] - mean;
                        sq += d * d;
                    }
                }
                let var = sq / count as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[gi * channels + c] = is;
                for n in 0..per_group {
                    for s in 0..spatial {
                        let i = idx(n, s);
                        let h = (xv[i] - mean) * is;
                        x_hat[i] = h;
                        y[i] = gv[c] * h + bv[c];
                    }
                }
                stats.mean[c] += mean / groups as f64;
                let unbiased = if count > 1 { sq / (count - 1) as f64 } else { 0.0 };
                stats.var[c] += unbiased / groups as f64;
            }
        }
        let shape = self.nodes[x.0].value.shape().to_vec();
        let value = Tensor::new(shape, y).expect("same shape");
        let id = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved: BnSaved {
                    x_hat,
                    inv_std,
                    groups,
                },
            },
            value,
        )?;
        Ok((id, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_frozen(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let (_, channels, spatial) = self.bn_dims("batch_norm_frozen", x, gamma, beta)?;
        if mean.len() != channels || var.len() != channels {
            return Err(self.shape_err(
                "batch_norm_frozen",
                format!("running statistics sized {}/{} for {channels} channels", mean.len(), var.len()),
            ));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();
        let y: Vec<f64> = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / spatial) % channels;
                gv[c] * ((v - mean[c]) * inv_std[c]) + bv[c]
            })
            .collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        let value = Tensor::new(shape, y).expect("same shape");
        self.push(
            Op::BatchNormFrozen {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            value,
        )
    }

    /// Leaf tags of every leaf from which `root` is reachable.
    pub fn leaf_tags_reaching(&self, root: NodeId) -> BTreeSet<LeafTag> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![root];
        let mut tags = BTreeSet::new();
        while let Some(id) = stack.pop() {
            if std::mem::replace(&mut seen[id.0], true) {
                continue;
            }
            match &self.nodes[id.0].op {
                Op::Leaf(tag) => {
                    tags.insert(*tag);
                }
                op => stack.extend(op.inputs()),
            }
        }
        tags
    }

    /// Tags of every leaf on the tape, reachable or not.
    pub fn leaf_tags(&self) -> BTreeSet<LeafTag> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Leaf(tag) => Some(tag),
                _ => None,
            })
            .collect()
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let shape = self.nodes[root.0].value.shape();
        if self.nodes[root.0].value.numel() != 1 {
            return Err(AutogradError::NonScalarRoot(shape.to_vec()));
        }
        self.backward_with_seeds(&[(root, &[1.0])])
    }

    /// Reverse sweep with explicit upstream gradients for one or more nodes.
    pub fn backward_with_seeds(&mut self, seeds: &[(NodeId, &[f64])]) -> Result<()> {
        if self.consumed {
            return Err(AutogradError::TapeConsumed);
        }
        for (id, g) in seeds {
            let n = self.nodes[id.0].value.numel();
            if g.len() != n {
                return Err(AutogradError::SeedLength {
                    node: id.0,
                    expected: n,
                    actual: g.len(),
                });
            }
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        let mut top = 0;
        for (id, g) in seeds {
            if self.nodes[id.0].requires_grad {
                accumulate(&mut self.grads[id.0], g.to_vec());
            }
            top = top.max(id.0 + 1);
        }
        for i in (0..top).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward root w.r.t. `id`; zeros when `id` was unreachable.
    pub fn grad(&self, id: NodeId) -> Vec<f64> {
        match self.grads.get(id.0) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; self.nodes[id.0].value.numel()],
        }
    }

    /// Moves the gradient buffer out; zeros when unreachable.
    pub fn take_grad(&mut self, id: NodeId) -> Vec<f64> {
        match self.grads.get_mut(id.0).and_then(Option::take) {
            Some(g) => g,
            None => vec![0.0; self.nodes[id.0].value.numel()],
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn send(&mut self, id: NodeId, contrib: Vec<f64>) {
        if self.wants(id) {
            accumulate(&mut self.grads[id.0], contrib);
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        let out = &self.nodes[i].value;
        match op {
            Op::Leaf(_) => {}
            Op::Reshape(a) => self.send(a, g.to_vec()),
            Op::Add(a, b) => {
                self.send(a, g.to_vec());
                self.send(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.send(a, g.to_vec());
                self.send(b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                let ga = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(va).map(|(g, x)| g * x).collect();
                self.send(a, ga);
                self.send(b, gb);
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                let ga = g.iter().zip(vb).map(|(g, y)| g / y).collect();
                let gb = g
                    .iter()
                    .zip(va.iter().zip(vb))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                self.send(a, ga);
                self.send(b, gb);
            }
            Op::Scale(a, k) => self.send(a, g.iter().map(|v| v * k).collect()),
            Op::AddScalar(a) => self.send(a, g.to_vec()),
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.numel();
                self.send(a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                self.send(a, vec![g[0] / n as f64; n]);
            }
            Op::Relu(a) => {
                let x = self.nodes[a.0].value.data();
                let ga = g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                self.send(a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.nodes[a.0].value.data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                    .collect();
                self.send(a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.send(a, ga);
            }
            Op::Exp(a) => {
                let ga = g.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                self.send(a, ga);
            }
            Op::Ln(a) => {
                let x = self.nodes[a.0].value.data();
                let ga = g.iter().zip(x).map(|(g, x)| g / x).collect();
                self.send(a, ga);
            }
            Op::Square(a) => {
                let x = self.nodes[a.0].value.data();
                let ga = g.iter().zip(x).map(|(g, x)| g * 2.0 * x).collect();
                self.send(a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.nodes[a.0].value.data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x >= lo && x <= hi { *g } else { 0.0 })
                    .collect();
                self.send(a, ga);
            }
            Op::SliceCols { x, start } => {
                let xs = self.nodes[x.0].value.shape();
                let (rows, cols) = (xs[0], xs[1]);
                let len = out.shape()[1];
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.send(x, gx);
            }
            Op::ConcatCols(parts) => {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    self.send(p, gp);
                }
            }
            Op::LogSoftmax(a) => {
                let (rows, cols) = (out.shape()[0], out.shape()[1]);
                let y = out.data();
                let mut ga = vec![0.0; rows * cols];
                for r in 0..rows {
                    let gs: f64 = g[r * cols..(r + 1) * cols].iter().sum();
                    for c in 0..cols {
                        let k = r * cols + c;
                        ga[k] = g[k] - y[k].exp() * gs;
                    }
                }
                self.send(a, ga);
            }
            Op::Dense { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let (batch, inp) = (xs[0], xs[1]);
                let outp = self.nodes[w.0].value.shape()[0];
                let mut gx = self.wants(x).then(|| vec![0.0; batch * inp]);
                let mut gw = self.wants(w).then(|| vec![0.0; outp * inp]);
                let mut gb = self.wants(b).then(|| vec![0.0; outp]);
                kernels::dense_backward(
                    batch,
                    inp,
                    outp,
                    self.nodes[x.0].value.data(),
                    self.nodes[w.0].value.data(),
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.send_opt(x, gx);
                self.send_opt(w, gw);
                self.send_opt(b, gb);
            }
            Op::Conv2d { x, w, b, geom } | Op::ConvTranspose2d { x, w, b, geom } => {
                let transposed = matches!(op, Op::ConvTranspose2d { .. });
                let mut gx = self.wants(x).then(|| vec![0.0; self.nodes[x.0].value.numel()]);
                let mut gw = self.wants(w).then(|| vec![0.0; self.nodes[w.0].value.numel()]);
                let mut gb = self.wants(b).then(|| vec![0.0; self.nodes[b.0].value.numel()]);
                let backward = if transposed {
                    kernels::conv_transpose2d_backward
                } else {
                    kernels::conv2d_backward
                };
                backward(
                    &geom,
                    self.nodes[x.0].value.data(),
                    self.nodes[w.0].value.data(),
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.send_opt(x, gx);
                self.send_opt(w, gw);
                self.send_opt(b, gb);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                ref saved,
            } => {
                let xs = self.nodes[x.0].value.shape();
                let batch = xs[0];
                let channels = xs[1];
                let spatial: usize = xs[2..].iter().product();
                let per_group = batch / saved.groups;
                let count = (per_group * spatial) as f64;
                let gamma_v = self.nodes[gamma.0].value.data();
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; channels];
                let mut gbeta = vec![0.0; channels];
                for gi in 0..saved.groups {
                    for c in 0..channels {
                        let idx =
                            |n: usize, s: usize| ((gi * per_group + n) * channels + c) * spatial + s;
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for n in 0..per_group {
                            for s in 0..spatial {
                                let k = idx(n, s);
                                sum_g += g[k];
                                sum_gx += g[k] * saved.x_hat[k];
                            }
                        }
                        gbeta[c] += sum_g;
                        gg[c] += sum_gx;
                        let scale = gamma_v[c] * saved.inv_std[gi * channels + c] / count;
                        for n in 0..per_group {
                            for s in 0..spatial {
                                let k = idx(n, s);
                                gx[k] = scale * (count * g[k] - sum_g - saved.x_hat[k] * sum_gx);
                            }
                        }
                    }
                }
                self.send(x, gx);
                self.send(gamma, gg);
                self.send(beta, gbeta);
            }
            Op::BatchNormFrozen {
                x,
                gamma,
                beta,
                ref mean,
                ref inv_std,
            } => {
                let xs = self.nodes[x.0].value.shape();
                let channels = xs[1];
                let spatial: usize = xs[2..].iter().product();
                let xv = self.nodes[x.0].value.data();
                let gamma_v = self.nodes[gamma.0].value.data();
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; channels];
                let mut gbeta = vec![0.0; channels];
                for (k, (&gk, &xk)) in g.iter().zip(xv).enumerate() {
                    let c = (k / spatial) % channels;
                    gx[k] = gk * gamma_v[c] * inv_std[c];
                    gg[c] += gk * (xk - mean[c]) * inv_std[c];
                    gbeta[c] += gk;
                }
                self.send(x, gx);
                self.send(gamma, gg);
                self.send(beta, gbeta);
            }
        }
    }

    fn send_opt(&mut self, id: NodeId, contrib: Option<Vec<f64>>) {
        if let Some(c) = contrib {
            self.send(id, c);
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        None => *slot = Some(contrib),
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
