//! Reverse-mode autodiff on a dynamic tape.
//!
//! A [`Graph`] records every executed operation as a node holding its inputs,
//! its materialized output, and enough information to replay the local
//! backward rule. Tape order is creation order, so every node's inputs appear
//! earlier; the backward pass is a single reverse sweep with gradient
//! accumulation. Graphs are rebuilt per training iteration and dropped after
//! backward — nothing here is retained across steps.
//!
//! Gradient tracking: a node requires grad iff any of its inputs does and it
//! was not created by `stop_gradient`. Nodes that do not require grad are
//! skipped entirely during backward.

use crate::error::{Error, Result};
use crate::linalg::{self, ConvGeom, ConvTGeom};
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

// Variants record their full operands even where backward reads none of them
// (stop-gradient's parent, the shift of an add-scalar), so a tape dump shows
// how every value was produced.
#[allow(dead_code)]
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGrad(ValueId),
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Div(ValueId, ValueId),
    AddScalar(ValueId, f64),
    SubScalar(ValueId, f64),
    MulScalar(ValueId, f64),
    DivScalar(ValueId, f64),
    Exp(ValueId),
    Abs(ValueId),
    Square(ValueId),
    Sqrt(ValueId),
    Silu(ValueId),
    Sum(ValueId, Vec<usize>),
    Mean(ValueId, Vec<usize>),
    SumAll(ValueId),
    MeanAll(ValueId),
    Conv2d { input: ValueId, kernel: ValueId, geom: ConvGeom },
    ConvT2d { input: ValueId, kernel: ValueId, geom: ConvTGeom },
    BiasAdd { input: ValueId, bias: ValueId },
    ConcatCh(ValueId, ValueId),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> ValueId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { op, shape, data, requires_grad });
        ValueId(self.nodes.len() - 1)
    }

    fn node(&self, id: ValueId) -> &Node {
        &self.nodes[id.0]
    }

    /// Registers a tensor as a tape leaf, honoring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Registers a tensor as a constant leaf regardless of its flag.
    pub fn constant(&mut self, t: &Tensor) -> ValueId {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Value-transparent gradient barrier: same data, no backward rule.
    pub fn stop_gradient(&mut self, a: ValueId) -> ValueId {
        let (shape, data) = {
            let n = self.node(a);
            (n.shape.clone(), n.data.clone())
        };
        self.push(Op::StopGrad(a), shape, data, false)
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.node(id).data
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.node(id).shape
    }

    /// Detached copy of a node's value.
    pub fn tensor(&self, id: ValueId) -> Tensor {
        let n = self.node(id);
        Tensor::new(n.data.clone(), &n.shape).expect("node invariant")
    }

    /// Gradient buffer for `id` from the most recent backward pass. `None`
    /// when the node was not on any gradient path.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn require_same_shape(&self, a: ValueId, b: ValueId, op: &str) -> Result<()> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::dimension(format!(
                "{op}: shapes {:?} and {:?} differ (only equal-shape and tensor-scalar forms are supported)",
                self.node(a).shape,
                self.node(b).shape
            )));
        }
        Ok(())
    }

    fn binary(&mut self, op: Op, a: ValueId, b: ValueId, f: impl Fn(f64, f64) -> f64) -> ValueId {
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        self.push(op, shape, data, rg)
    }

    fn unary(&mut self, op: Op, a: ValueId, f: impl Fn(f64) -> f64) -> ValueId {
        let data: Vec<f64> = self.node(a).data.iter().map(|&x| f(x)).collect();
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad;
        self.push(op, shape, data, rg)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.require_same_shape(a, b, "add")?;
        Ok(self.binary(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.require_same_shape(a, b, "sub")?;
        Ok(self.binary(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.require_same_shape(a, b, "mul")?;
        Ok(self.binary(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.require_same_shape(a, b, "div")?;
        Ok(self.binary(Op::Div(a, b), a, b, |x, y| x / y))
    }

    pub fn add_scalar(&mut self, a: ValueId, s: f64) -> ValueId {
        self.unary(Op::AddScalar(a, s), a, |x| x + s)
    }

    pub fn sub_scalar(&mut self, a: ValueId, s: f64) -> ValueId {
        self.unary(Op::SubScalar(a, s), a, |x| x - s)
    }

    pub fn mul_scalar(&mut self, a: ValueId, s: f64) -> ValueId {
        self.unary(Op::MulScalar(a, s), a, |x| x * s)
    }

    pub fn div_scalar(&mut self, a: ValueId, s: f64) -> ValueId {
        self.unary(Op::DivScalar(a, s), a, |x| x / s)
    }

    pub fn exp(&mut self, a: ValueId) -> ValueId {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    /// |x|; the backward rule uses sign(x) with sign(0) = 0, the usual
    /// subgradient choice for L1 losses.
    pub fn abs(&mut self, a: ValueId) -> ValueId {
        self.unary(Op::Abs(a), a, f64::abs)
    }

    pub fn square(&mut self, a: ValueId) -> ValueId {
        self.unary(Op::Square(a), a, |x| x * x)
    }

    pub fn sqrt(&mut self, a: ValueId) -> ValueId {
        self.unary(Op::Sqrt(a), a, f64::sqrt)
    }

    /// x * sigmoid(x), the smooth activation used by the generator.
    pub fn silu(&mut self, a: ValueId) -> ValueId {
        self.unary(Op::Silu(a), a, |x| x * sigmoid(x))
    }

    fn check_axes(&self, a: ValueId, axes: &[usize]) -> Result<()> {
        let rank = self.node(a).shape.len();
        let mut seen = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(Error::dimension(format!(
                    "reduce axis {ax} out of range for rank {rank}"
                )));
            }
            if seen[ax] {
                return Err(Error::contract(format!("reduce axis {ax} listed twice")));
            }
            seen[ax] = true;
        }
        Ok(())
    }

    fn reduce_forward(&self, a: ValueId, axes: &[usize], mean: bool) -> (Vec<usize>, Vec<f64>) {
        let shape = &self.node(a).shape;
        let rank = shape.len();
        let reduced: Vec<bool> = {
            let mut m = vec![false; rank];
            for &ax in axes {
                m[ax] = true;
            }
            m
        };
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(d, _)| !reduced[*d])
            .map(|(_, &s)| s)
            .collect();
        let mut out = vec![0.0; numel(&out_shape)];
        // Row-major walk of the input with a running output offset.
        let mut out_strides = vec![0usize; rank];
        {
            let mut stride = 1usize;
            for d in (0..rank).rev() {
                if !reduced[d] {
                    out_strides[d] = stride;
                    stride *= shape[d];
                }
            }
        }
        let data = &self.node(a).data;
        let mut idx = vec![0usize; rank];
        for &v in data {
            let mut off = 0;
            for d in 0..rank {
                if !reduced[d] {
                    off += idx[d] * out_strides[d];
                }
            }
            out[off] += v;
            // increment multi-index
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        if mean {
            let count: usize = axes.iter().map(|&ax| shape[ax]).product();
            let inv = 1.0 / count as f64;
            for v in &mut out {
                *v *= inv;
            }
        }
        (out_shape, out)
    }

    /// Sum over the given axes (removed from the output shape).
    pub fn sum(&mut self, a: ValueId, axes: &[usize]) -> Result<ValueId> {
        self.check_axes(a, axes)?;
        let (shape, data) = self.reduce_forward(a, axes, false);
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::Sum(a, axes.to_vec()), shape, data, rg))
    }

    /// Mean over the given axes (removed from the output shape).
    pub fn mean(&mut self, a: ValueId, axes: &[usize]) -> Result<ValueId> {
        self.check_axes(a, axes)?;
        let (shape, data) = self.reduce_forward(a, axes, true);
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::Mean(a, axes.to_vec()), shape, data, rg))
    }

    /// Sum of every element, producing a scalar.
    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let total: f64 = self.node(a).data.iter().sum();
        let rg = self.node(a).requires_grad;
        self.push(Op::SumAll(a), vec![], vec![total], rg)
    }

    /// Mean of every element, producing a scalar.
    pub fn mean_all(&mut self, a: ValueId) -> ValueId {
        let n = self.node(a).data.len() as f64;
        let total: f64 = self.node(a).data.iter().sum();
        let rg = self.node(a).requires_grad;
        self.push(Op::MeanAll(a), vec![], vec![total / n], rg)
    }

    /// Cross-correlation of [B,Cin,H,W] with [Cout,Cin,k,k], zero padding.
    pub fn conv2d(
        &mut self,
        input: ValueId,
        kernel: ValueId,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId> {
        let ishape = self.node(input).shape.clone();
        let kshape = self.node(kernel).shape.clone();
        if ishape.len() != 4 || kshape.len() != 4 {
            return Err(Error::dimension(format!(
                "conv2d expects rank-4 input and kernel, got {ishape:?} and {kshape:?}"
            )));
        }
        if kshape[2] != kshape[3] {
            return Err(Error::dimension(format!("conv2d kernel must be square, got {kshape:?}")));
        }
        if ishape[1] != kshape[1] {
            return Err(Error::dimension(format!(
                "conv2d channel mismatch: input has {} channels, kernel expects {}",
                ishape[1], kshape[1]
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be positive".to_string()));
        }
        if ishape[2] + 2 * padding < kshape[2] || ishape[3] + 2 * padding < kshape[3] {
            return Err(Error::dimension(format!(
                "conv2d kernel {}x{} larger than padded input {:?}",
                kshape[2], kshape[3], ishape
            )));
        }
        let geom = ConvGeom {
            batch: ishape[0],
            in_ch: ishape[1],
            h: ishape[2],
            w: ishape[3],
            out_ch: kshape[0],
            k: kshape[2],
            stride,
            padding,
        };
        let out = linalg::conv2d_forward(&self.node(input).data, &self.node(kernel).data, &geom);
        let shape = vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()];
        let rg = self.node(input).requires_grad || self.node(kernel).requires_grad;
        Ok(self.push(Op::Conv2d { input, kernel, geom }, shape, out, rg))
    }

    /// Transposed convolution of [B,Cin,H,W] with [Cin,Cout,k,k] (no padding);
    /// with k == stride this is exact k-fold upsampling.
    pub fn conv_transpose2d(
        &mut self,
        input: ValueId,
        kernel: ValueId,
        stride: usize,
    ) -> Result<ValueId> {
        let ishape = self.node(input).shape.clone();
        let kshape = self.node(kernel).shape.clone();
        if ishape.len() != 4 || kshape.len() != 4 {
            return Err(Error::dimension(format!(
                "conv_transpose2d expects rank-4 input and kernel, got {ishape:?} and {kshape:?}"
            )));
        }
        if kshape[2] != kshape[3] {
            return Err(Error::dimension(format!(
                "conv_transpose2d kernel must be square, got {kshape:?}"
            )));
        }
        if ishape[1] != kshape[0] {
            return Err(Error::dimension(format!(
                "conv_transpose2d channel mismatch: input has {} channels, kernel expects {}",
                ishape[1], kshape[0]
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv_transpose2d stride must be positive".to_string()));
        }
        let geom = ConvTGeom {
            batch: ishape[0],
            in_ch: ishape[1],
            h: ishape[2],
            w: ishape[3],
            out_ch: kshape[1],
            k: kshape[2],
            stride,
        };
        let out = linalg::convt2d_forward(&self.node(input).data, &self.node(kernel).data, &geom);
        let shape = vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()];
        let rg = self.node(input).requires_grad || self.node(kernel).requires_grad;
        Ok(self.push(Op::ConvT2d { input, kernel, geom }, shape, out, rg))
    }

    /// Adds a per-channel bias [C] to a [B,C,H,W] activation.
    pub fn bias_add(&mut self, input: ValueId, bias: ValueId) -> Result<ValueId> {
        let ishape = self.node(input).shape.clone();
        let bshape = self.node(bias).shape.clone();
        if ishape.len() != 4 || bshape.len() != 1 || bshape[0] != ishape[1] {
            return Err(Error::dimension(format!(
                "bias_add expects [B,C,H,W] input and [C] bias, got {ishape:?} and {bshape:?}"
            )));
        }
        let hw = ishape[2] * ishape[3];
        let mut data = self.node(input).data.clone();
        {
            let bias_vals = &self.node(bias).data;
            for b in 0..ishape[0] {
                for c in 0..ishape[1] {
                    let base = (b * ishape[1] + c) * hw;
                    let bv = bias_vals[c];
                    for v in &mut data[base..base + hw] {
                        *v += bv;
                    }
                }
            }
        }
        let rg = self.node(input).requires_grad || self.node(bias).requires_grad;
        Ok(self.push(Op::BiasAdd { input, bias }, ishape, data, rg))
    }

    /// Concatenates two [B,C,H,W] tensors along the channel axis.
    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let sa = self.node(a).shape.clone();
        let sb = self.node(b).shape.clone();
        if sa.len() != 4 || sb.len() != 4 {
            return Err(Error::dimension(format!(
                "concat_channels expects rank-4 tensors, got {sa:?} and {sb:?}"
            )));
        }
        if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(Error::dimension(format!(
                "concat_channels: non-channel dims differ ({sa:?} vs {sb:?})"
            )));
        }
        let (ca, cb, hw) = (sa[1], sb[1], sa[2] * sa[3]);
        let shape = vec![sa[0], ca + cb, sa[2], sa[3]];
        let mut data = Vec::with_capacity(numel(&shape));
        for bi in 0..sa[0] {
            data.extend_from_slice(&self.node(a).data[bi * ca * hw..(bi + 1) * ca * hw]);
            data.extend_from_slice(&self.node(b).data[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::ConcatCh(a, b), shape, data, rg))
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: ValueId, contrib: &[f64]) {
        if !nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(g) => {
                for (acc, v) in g.iter_mut().zip(contrib) {
                    *acc += v;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Reverse sweep from a scalar loss node. Gradients accumulate over all
    /// paths; leaves off the loss path end up with no gradient. Repeated
    /// calls recompute from scratch.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.node(loss).requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::StopGrad(_) => {}
                Op::Add(a, b) => {
                    Self::accumulate(&mut grads, &self.nodes, *a, &gout);
                    Self::accumulate(&mut grads, &self.nodes, *b, &gout);
                }
                Op::Sub(a, b) => {
                    Self::accumulate(&mut grads, &self.nodes, *a, &gout);
                    let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                    Self::accumulate(&mut grads, &self.nodes, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let ga: Vec<f64> =
                        gout.iter().zip(&self.nodes[b.0].data).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> =
                        gout.iter().zip(&self.nodes[a.0].data).map(|(g, x)| g * x).collect();
                    Self::accumulate(&mut grads, &self.nodes, *a, &ga);
                    Self::accumulate(&mut grads, &self.nodes, *b, &gb);
                }
                Op::Div(a, b) => {
                    let ga: Vec<f64> =
                        gout.iter().zip(&self.nodes[b.0].data).map(|(g, y)| g / y).collect();
                    let gb: Vec<f64> = gout
                        .iter()
                        .zip(self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    Self::accumulate(&mut grads, &self.nodes, *a, &ga);
                    Self::accumulate(&mut grads, &self.nodes, *b, &gb);
                }
                Op::AddScalar(a, _) | Op::SubScalar(a, _) => {
                    Self::accumulate(&mut grads, &self.nodes, *a, &gout);
                }
                Op::MulScalar(a, s) => {
                    let ga: Vec<f64> = gout.iter().map(|g| g * s).collect();
                    Self::accumulate(&mut grads, &self.nodes, *a, &ga);
                }
                Op::DivScalar(a, s) => {
                    let ga: Vec<f64> = gout.iter().map(|g| g / s).collect();
                    Self::accumulate(&mut grads, &self.nodes, *a, &ga);
                }
                Op::Exp(a) => {
                    let ga: Vec<f64> =
                        gout.iter().zip(&node.data).map(|(g, y)| g * y).collect();
                    Self::accumulate(&mut grads, &self.nodes, *a, &ga);
                }
                Op::Abs(a) => {
                    let ga: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, x)| {
                            if *x > 0.0 {
                                *g
                            } else if *x < 0.0 {
                                -*g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    Self::accumulate(&mut grads, &self.nodes, *a, &ga);
                }
                Op::Square(a) => {
                    let ga: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, x)| 2.0 * x * g)
                        .collect();
                    Self::accumulate(&mut grads, &self.nodes, *a, &ga);
                }
                Op::Sqrt(a) => {
                    let ga: Vec<f64> = gout
                        .iter()
                        .zip(&node.data)
                        .map(|(g, y)| g / (2.0 * y))
                        .collect();
                    Self::accumulate(&mut grads, &self.nodes, *a, &ga);
                }
                Op::Silu(a) => {
                    let ga: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, x)| {
                            let s = sigmoid(*x);
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    Self::accumulate(&mut grads, &self.nodes, *a, &ga);
                }
                Op::Sum(a, axes) | Op::Mean(a, axes) => {
                    let mean = matches!(node.op, Op::Mean(..));
                    let in_shape = self.nodes[a.0].shape.clone();
                    let rank = in_shape.len();
                    let mut reduced = vec![false; rank];
                    for &ax in axes {
                        reduced[ax] = true;
                    }
                    let scale = if mean {
                        let count: usize = axes.iter().map(|&ax| in_shape[ax]).product();
                        1.0 / count as f64
                    } else {
                        1.0
                    };
                    let mut out_strides = vec![0usize; rank];
                    {
                        let mut stride = 1usize;
                        for d in (0..rank).rev() {
                            if !reduced[d] {
                                out_strides[d] = stride;
                                stride *= in_shape[d];
                            }
                        }
                    }
                    let mut ga = vec![0.0; self.nodes[a.0].data.len()];
                    let mut idx = vec![0usize; rank];
                    for slot in ga.iter_mut() {
                        let mut off = 0;
                        for d in 0..rank {
                            if !reduced[d] {
                                off += idx[d] * out_strides[d];
                            }
                        }
                        *slot = gout[off] * scale;
                        for d in (0..rank).rev() {
                            idx[d] += 1;
                            if idx[d] < in_shape[d] {
                                break;
                            }
                            idx[d] = 0;
                        }
                    }
                    Self::accumulate(&mut grads, &self.nodes, *a, &ga);
                }
                Op::SumAll(a) => {
                    let ga = vec![gout[0]; self.nodes[a.0].data.len()];
                    Self::accumulate(&mut grads, &self.nodes, *a, &ga);
                }
                Op::MeanAll(a) => {
                    let n_in = self.nodes[a.0].data.len();
                    let ga = vec![gout[0] / n_in as f64; n_in];
                    Self::accumulate(&mut grads, &self.nodes, *a, &ga);
                }
                Op::Conv2d { input, kernel, geom } => {
                    let (gin, gk) = linalg::conv2d_backward(
                        &self.nodes[input.0].data,
                        &self.nodes[kernel.0].data,
                        &gout,
                        geom,
                    );
                    Self::accumulate(&mut grads, &self.nodes, *input, &gin);
                    Self::accumulate(&mut grads, &self.nodes, *kernel, &gk);
                }
                Op::ConvT2d { input, kernel, geom } => {
                    let (gin, gk) = linalg::convt2d_backward(
                        &self.nodes[input.0].data,
                        &self.nodes[kernel.0].data,
                        &gout,
                        geom,
                    );
                    Self::accumulate(&mut grads, &self.nodes, *input, &gin);
                    Self::accumulate(&mut grads, &self.nodes, *kernel, &gk);
                }
                Op::BiasAdd { input, bias } => {
                    Self::accumulate(&mut grads, &self.nodes, *input, &gout);
                    let ishape = &self.nodes[input.0].shape;
                    let (bsz, ch, hw) = (ishape[0], ishape[1], ishape[2] * ishape[3]);
                    let mut gb = vec![0.0; ch];
                    for b in 0..bsz {
                        for c in 0..ch {
                            let base = (b * ch + c) * hw;
                            gb[c] += gout[base..base + hw].iter().sum::<f64>();
                        }
                    }
                    Self::accumulate(&mut grads, &self.nodes, *bias, &gb);
                }
                Op::ConcatCh(a, b) => {
                    let sa = &self.nodes[a.0].shape;
                    let sb = &self.nodes[b.0].shape;
                    let (bsz, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                    let mut ga = vec![0.0; self.nodes[a.0].data.len()];
                    let mut gb = vec![0.0; self.nodes[b.0].data.len()];
                    let row = (ca + cb) * hw;
                    for bi in 0..bsz {
                        ga[bi * ca * hw..(bi + 1) * ca * hw]
                            .copy_from_slice(&gout[bi * row..bi * row + ca * hw]);
                        gb[bi * cb * hw..(bi + 1) * cb * hw]
                            .copy_from_slice(&gout[bi * row + ca * hw..(bi + 1) * row]);
                    }
                    Self::accumulate(&mut grads, &self.nodes, *a, &ga);
                    Self::accumulate(&mut grads, &self.nodes, *b, &gb);
                }
            }
            // Keep the output gradient around for inspection unless it's an
            // interior temporary; leaves are what callers query.
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    /// Copies the gradient of `id` into the tensor's grad slot (zeros when the
    /// node was off the loss path).
    pub fn write_grad_into(&self, id: ValueId, t: &mut Tensor) -> Result<()> {
        let g = match self.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.len()],
        };
        t.set_grad(Some(g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_grad(g: &mut Graph, data: Vec<f64>, shape: &[usize]) -> ValueId {
        let t = Tensor::new(data, shape).unwrap().with_requires_grad();
        g.leaf(&t)
    }

    #[test]
    fn add_and_grads() {
        let mut g = Graph::new();
        let a = leaf_grad(&mut g, vec![1.0, 2.0], &[2]);
        let b = leaf_grad(&mut g, vec![3.0, 4.0], &[2]);
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s), &[4.0, 6.0]);
        let loss = g.sum_all(s);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.grad(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn exp_values() {
        let mut g = Graph::new();
        let a = leaf_grad(&mut g, vec![0.0, -2.0], &[2]);
        let e = g.exp(a);
        assert_eq!(g.value(e)[0], 1.0);
        assert!((g.value(e)[1] - 0.1353352832366127).abs() < 1e-16);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, vec![3.0, 4.0], &[2]);
        let sq = g.square(x);
        let loss = g.sum_all(sq);
        assert_eq!(g.value(loss), &[25.0]);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0, 8.0]);
    }

    #[test]
    fn mean_and_axis_sum() {
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, vec![2.0, 4.0, 6.0], &[3]);
        let m = g.mean_all(x);
        assert_eq!(g.value(m), &[4.0]);
        g.backward(m).unwrap();
        for v in g.grad(x).unwrap() {
            assert!((v - 1.0 / 3.0).abs() < 1e-16);
        }

        let mut g2 = Graph::new();
        let x2 = leaf_grad(&mut g2, vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let s = g2.sum(x2, &[0]).unwrap();
        assert_eq!(g2.shape(s), &[2]);
        assert_eq!(g2.value(s), &[4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = leaf_grad(&mut g, vec![1.0, 2.0], &[2]);
        let b = leaf_grad(&mut g, vec![1.0, 2.0, 3.0], &[3]);
        match g.add(a, b) {
            Err(crate::error::Error::Dimension(_)) => {}
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let a = leaf_grad(&mut g, vec![1.0, 2.0], &[2]);
        match g.backward(a) {
            Err(crate::error::Error::Contract(_)) => {}
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn stop_gradient_is_value_transparent_and_blocks_flow() {
        // y = x * stopgrad(x) at x = 3: value 9, dy/dx = 3 (product rule sees
        // the second factor as a constant).
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, vec![3.0], &[1]);
        let frozen = g.stop_gradient(x);
        assert_eq!(g.value(frozen), &[3.0]);
        let y = g.mul(x, frozen).unwrap();
        assert_eq!(g.value(y), &[9.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0]);

        // loss built purely from a stopped value leaves the leaf without grad.
        let mut g2 = Graph::new();
        let x2 = leaf_grad(&mut g2, vec![3.0], &[1]);
        let frozen2 = g2.stop_gradient(x2);
        let sq = g2.square(frozen2);
        let loss2 = g2.sum_all(sq);
        g2.backward(loss2).unwrap();
        assert!(g2.grad(x2).is_none());
    }

    #[test]
    fn gradient_accumulates_across_paths() {
        // loss = sum(x*x) + sum(x) touches x twice; grads must add.
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, vec![1.0, -2.0], &[2]);
        let sq = g.square(x);
        let l1 = g.sum_all(sq);
        let l2 = g.sum_all(x);
        let loss = g.add(l1, l2).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, -3.0]); // 2x + 1
    }

    #[test]
    fn conv2d_all_ones_center_is_nine() {
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, vec![1.0; 9], &[1, 1, 3, 3]);
        let k = leaf_grad(&mut g, vec![1.0; 9], &[1, 1, 3, 3]);
        let y = g.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        let v = g.value(y);
        assert_eq!(v[4], 9.0); // center sees the full window
        assert_eq!(v[0], 4.0); // corner sees a 2x2 window
        assert_eq!(v[1], 6.0); // edge sees a 2x3 window
    }

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = leaf_grad(&mut g, data.clone(), &[1, 1, 4, 4]);
        let mut kdata = vec![0.0; 9];
        kdata[4] = 1.0; // delta at the kernel center
        let k = leaf_grad(&mut g, kdata, &[1, 1, 3, 3]);
        let y = g.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(g.value(y), data.as_slice());
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, vec![0.0; 2 * 9], &[1, 2, 3, 3]);
        let k = leaf_grad(&mut g, vec![0.0; 3 * 9], &[1, 3, 3, 3]);
        assert!(matches!(g.conv2d(x, k, 1, 1), Err(crate::error::Error::Dimension(_))));
    }

    #[test]
    fn concat_and_bias_roundtrip_gradients() {
        let mut g = Graph::new();
        let a = leaf_grad(&mut g, vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let b = leaf_grad(&mut g, vec![-1.0, -2.0, -3.0, -4.0], &[1, 1, 2, 2]);
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.shape(c), &[1, 2, 2, 2]);
        let bias = leaf_grad(&mut g, vec![10.0, 20.0], &[2]);
        let y = g.bias_add(c, bias).unwrap();
        assert_eq!(g.value(y), &[11.0, 12.0, 13.0, 14.0, 19.0, 18.0, 17.0, 16.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(g.grad(b).unwrap(), &[1.0; 4]);
        assert_eq!(g.grad(bias).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn backward_of_summed_losses_is_sum_of_backwards() {
        let build = |with_first: bool, with_second: bool| -> Vec<f64> {
            let mut g = Graph::new();
            let x = leaf_grad(&mut g, vec![0.4, -0.7, 1.3], &[3]);
            let sq = g.square(x);
            let l1 = g.sum_all(sq);
            let e = g.exp(x);
            let l2 = g.mean_all(e);
            let loss = match (with_first, with_second) {
                (true, true) => g.add(l1, l2).unwrap(),
                (true, false) => l1,
                (false, true) => l2,
                _ => unreachable!(),
            };
            g.backward(loss).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        let both = build(true, true);
        let first = build(true, false);
        let second = build(false, true);
        for i in 0..3 {
            assert!((both[i] - (first[i] + second[i])).abs() < 1e-15);
        }
    }
}
