//! Reverse-mode autodiff on a flat tape. Ops are batched (a leading axis is
//! folded into gemm loops), so a full training step is a few hundred nodes
//! regardless of batch size. Forward values are computed eagerly at node
//! creation; `backward` walks the tape once in reverse.
//!
//! Gradients only flow where they can reach a differentiable leaf; constants
//! and anything behind `stop_grad` stay exactly zero by construction.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    /// matmul with optional transposed rhs; lhs/rhs may carry a batch axis.
    Matmul { nt: bool },
    Add,
    /// a + alpha * b
    AddScaled(S),
    /// (.., D) + (D)
    AddBias,
    /// (B, T, D) + (T, D)
    AddTokens,
    /// (B, T, D) + (B, 1, D)
    AddAxis1,
    Mul,
    /// (B, ..) * (B) — one scalar per batch row
    MulBScalar,
    /// x * s with s a [1] node
    MulScalarNode,
    /// x + s with s a [1] node
    AddScalarNode,
    Scale(S),
    Relu,
    /// softmax over the last axis; the additive mask is applied at forward
    /// time only (masked entries have p = 0, hence zero gradient)
    SoftmaxLast,
    /// ln(max(x, floor))
    LogFloor(S),
    /// layernorm over last axis; inputs (x, gamma, beta)
    LayerNorm { eps: S },
    SumAll,
    /// (B, T, D) -> (B, 1, D)
    MeanAxis1,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Reshape,
    /// (B, T, D) -> (B*h, T, D/h)
    SplitHeads { h: usize },
    /// (B*h, T, dh) -> (B, T, h*dh)
    MergeHeads { h: usize },
    /// (B, K) -> (B), picking column k
    SelectLast { k: usize },
    StopGrad,
}

struct Node<S> {
    op: Op<S>,
    inputs: Vec<NodeId>,
    value: Tensor<S>,
    needs_grad: bool,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Per-node gradients produced by [`Tape::backward`]. Nodes outside the
/// differentiable cone hold `None`.
pub struct Grads<S>(Vec<Option<Tensor<S>>>);

impl<S: Scalar> Grads<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.0[id.0].as_ref()
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<S>, inputs: Vec<NodeId>, value: Tensor<S>) -> NodeId {
        let needs_grad = match op {
            Op::Leaf => false, // set by `param`
            Op::StopGrad => false,
            _ => inputs.iter().any(|&i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node { op, inputs, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-differentiable input (data, masks, targets).
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    /// Differentiable input (parameters).
    pub fn param(&mut self, value: Tensor<S>) -> NodeId {
        let id = self.push(Op::Leaf, vec![], value);
        self.nodes[id.0].needs_grad = true;
        id
    }

    // ---- op constructors -------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_impl(a, b, false)
    }

    /// a @ b^T (b stored row-major as (.., n, k))
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, nt: bool) -> NodeId {
        let value = {
            let av = self.value(a);
            let bv = self.value(b);
            matmul_forward(av, bv, nt)
        };
        self.push(Op::Matmul { nt }, vec![a, b], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
            let d: Vec<S> =
                av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
            Tensor::new(av.shape().to_vec(), d)
        };
        self.push(Op::Add, vec![a, b], value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add_scaled(a, b, S::from_f64(-1.0))
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, alpha: S) -> NodeId {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            assert_eq!(av.shape(), bv.shape(), "add_scaled shape mismatch");
            let d: Vec<S> =
                av.data().iter().zip(bv.data()).map(|(&x, &y)| x + alpha * y).collect();
            Tensor::new(av.shape().to_vec(), d)
        };
        self.push(Op::AddScaled(alpha), vec![a, b], value)
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let value = {
            let (av, bv) = (self.value(a), self.value(bias));
            let d = *av.shape().last().unwrap();
            assert_eq!(bv.shape(), [d], "bias must match last axis");
            let mut out = av.clone();
            for (i, x) in out.data_mut().iter_mut().enumerate() {
                *x = *x + bv.data()[i % d];
            }
            out
        };
        self.push(Op::AddBias, vec![a, bias], value)
    }

    pub fn add_tokens(&mut self, a: NodeId, t: NodeId) -> NodeId {
        let value = {
            let (av, tv) = (self.value(a), self.value(t));
            assert_eq!(av.ndim(), 3);
            assert_eq!(&av.shape()[1..], tv.shape(), "token table must match (T, D)");
            let td = tv.len();
            let mut out = av.clone();
            for (i, x) in out.data_mut().iter_mut().enumerate() {
                *x = *x + tv.data()[i % td];
            }
            out
        };
        self.push(Op::AddTokens, vec![a, t], value)
    }

    pub fn add_axis1(&mut self, a: NodeId, r: NodeId) -> NodeId {
        let value = {
            let (av, rv) = (self.value(a), self.value(r));
            let (b, t, d) = av.as_bmk();
            assert_eq!(rv.shape(), [b, 1, d], "axis1 broadcast must be (B, 1, D)");
            let mut out = av.clone();
            for bi in 0..b {
                for ti in 0..t {
                    for di in 0..d {
                        let o = (bi * t + ti) * d + di;
                        out.data_mut()[o] = out.data()[o] + rv.data()[bi * d + di];
                    }
                }
            }
            out
        };
        self.push(Op::AddAxis1, vec![a, r], value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
            let d: Vec<S> =
                av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
            Tensor::new(av.shape().to_vec(), d)
        };
        self.push(Op::Mul, vec![a, b], value)
    }

    pub fn mul_bscalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let value = {
            let (av, sv) = (self.value(a), self.value(s));
            let b = av.shape()[0];
            assert_eq!(sv.shape(), [b], "per-batch scalar must be (B)");
            let per = av.len() / b;
            let mut out = av.clone();
            for (i, x) in out.data_mut().iter_mut().enumerate() {
                *x = *x * sv.data()[i / per];
            }
            out
        };
        self.push(Op::MulBScalar, vec![a, s], value)
    }

    pub fn mul_scalar_node(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let value = {
            let (av, sv) = (self.value(a), self.value(s));
            assert_eq!(sv.len(), 1);
            av.map(|x| x * sv.data()[0])
        };
        self.push(Op::MulScalarNode, vec![a, s], value)
    }

    pub fn add_scalar_node(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let value = {
            let (av, sv) = (self.value(a), self.value(s));
            assert_eq!(sv.len(), 1);
            av.map(|x| x + sv.data()[0])
        };
        self.push(Op::AddScalarNode, vec![a, s], value)
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let value = self.value(a).map(|x| x * c);
        self.push(Op::Scale(c), vec![a], value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(Op::Relu, vec![a], value)
    }

    pub fn softmax_last(&mut self, a: NodeId, mask: Option<Tensor<S>>) -> NodeId {
        let value = {
            let av = self.value(a);
            softmax_forward(av, mask.as_ref())
        };
        self.push(Op::SoftmaxLast, vec![a], value)
    }

    pub fn log_floor(&mut self, a: NodeId, floor: S) -> NodeId {
        let value = self.value(a).map(|x| if x > floor { x.ln() } else { floor.ln() });
        self.push(Op::LogFloor(floor), vec![a], value)
    }

    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: S) -> NodeId {
        let value = {
            let xv = self.value(x);
            let gv = self.value(gamma);
            let bv = self.value(beta);
            let d = *xv.shape().last().unwrap();
            assert_eq!(gv.shape(), [d]);
            assert_eq!(bv.shape(), [d]);
            let mut out = xv.clone();
            let rows = xv.len() / d;
            for r in 0..rows {
                let row = &xv.data()[r * d..(r + 1) * d];
                let mean = row.iter().fold(S::zero(), |s, &v| s + v) / S::from_f64(d as f64);
                let var = row
                    .iter()
                    .fold(S::zero(), |s, &v| s + (v - mean) * (v - mean))
                    / S::from_f64(d as f64);
                let inv = (var + eps).sqrt().recip();
                for i in 0..d {
                    out.data_mut()[r * d + i] =
                        (row[i] - mean) * inv * gv.data()[i] + bv.data()[i];
                }
            }
            out
        };
        self.push(Op::LayerNorm { eps }, vec![x, gamma, beta], value)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = {
            let s = self.value(a).data().iter().fold(S::zero(), |s, &v| s + v);
            Tensor::scalar(s)
        };
        self.push(Op::SumAll, vec![a], value)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, S::from_f64(1.0 / n as f64))
    }

    pub fn mean_axis1(&mut self, a: NodeId) -> NodeId {
        let value = {
            let av = self.value(a);
            let (b, t, d) = av.as_bmk();
            assert_eq!(av.ndim(), 3);
            let mut out = Tensor::zeros(vec![b, 1, d]);
            for bi in 0..b {
                for ti in 0..t {
                    for di in 0..d {
                        out.data_mut()[bi * d + di] = out.data()[bi * d + di]
                            + av.data()[(bi * t + ti) * d + di];
                    }
                }
            }
            let inv = S::from_f64(1.0 / t as f64);
            for x in out.data_mut() {
                *x = *x * inv;
            }
            out
        };
        self.push(Op::MeanAxis1, vec![a], value)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        assert!(!parts.is_empty());
        let value = {
            let tensors: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
            concat_forward(&tensors, axis)
        };
        self.push(Op::Concat { axis }, parts.to_vec(), value)
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let value = {
            let av = self.value(a);
            slice_forward(av, axis, start, len)
        };
        self.push(Op::Slice { axis, start }, vec![a], value)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let value = self.value(a).clone().reshaped(shape);
        self.push(Op::Reshape, vec![a], value)
    }

    pub fn split_heads(&mut self, a: NodeId, h: usize) -> NodeId {
        let value = {
            let av = self.value(a);
            let (b, t, d) = av.as_bmk();
            assert_eq!(av.ndim(), 3);
            assert_eq!(d % h, 0, "model dim {d} not divisible by {h} heads");
            let dh = d / h;
            let mut out = Tensor::zeros(vec![b * h, t, dh]);
            for bi in 0..b {
                for hi in 0..h {
                    for ti in 0..t {
                        for j in 0..dh {
                            out.data_mut()[((bi * h + hi) * t + ti) * dh + j] =
                                av.data()[(bi * t + ti) * d + hi * dh + j];
                        }
                    }
                }
            }
            out
        };
        self.push(Op::SplitHeads { h }, vec![a], value)
    }

    pub fn merge_heads(&mut self, a: NodeId, h: usize) -> NodeId {
        let value = {
            let av = self.value(a);
            let (bh, t, dh) = av.as_bmk();
            assert_eq!(av.ndim(), 3);
            assert_eq!(bh % h, 0);
            let b = bh / h;
            let d = dh * h;
            let mut out = Tensor::zeros(vec![b, t, d]);
            for bi in 0..b {
                for hi in 0..h {
                    for ti in 0..t {
                        for j in 0..dh {
                            out.data_mut()[(bi * t + ti) * d + hi * dh + j] =
                                av.data()[((bi * h + hi) * t + ti) * dh + j];
                        }
                    }
                }
            }
            out
        };
        self.push(Op::MergeHeads { h }, vec![a], value)
    }

    pub fn select_last(&mut self, a: NodeId, k: usize) -> NodeId {
        let value = {
            let av = self.value(a);
            assert_eq!(av.ndim(), 2);
            let (b, cols) = (av.shape()[0], av.shape()[1]);
            assert!(k < cols);
            let d: Vec<S> = (0..b).map(|bi| av.data()[bi * cols + k]).collect();
            Tensor::new(vec![b], d)
        };
        self.push(Op::SelectLast { k }, vec![a], value)
    }

    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.push(Op::StopGrad, vec![a], value)
    }

    /// Sum of squared differences: Σ (a - b)^2, the Eq. 7 building block.
    pub fn sse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.sum_all(sq)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar root. Returns per-node gradients; nodes
    /// outside the differentiable cone hold `None`.
    pub fn backward(&self, root: NodeId) -> Grads<S> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].needs_grad {
            return Grads(grads);
        }
        grads[root.0] = Some(Tensor::filled(self.value(root).shape().to_vec(), S::one()));
        for idx in (0..=root.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads(grads)
    }

    fn ensure<'a>(
        &self,
        grads: &'a mut [Option<Tensor<S>>],
        id: NodeId,
    ) -> &'a mut Tensor<S> {
        if grads[id.0].is_none() {
            grads[id.0] = Some(Tensor::zeros(self.value(id).shape().to_vec()));
        }
        grads[id.0].as_mut().unwrap()
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[idx];
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Matmul { nt } => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let av = self.value(a).clone();
                let bv = self.value(b).clone();
                if needs(a) {
                    let ga = self.ensure(grads, a);
                    matmul_backward_a(g, &bv, *nt, ga);
                }
                if needs(b) {
                    let gb = self.ensure(grads, b);
                    matmul_backward_b(g, &av, *nt, gb);
                }
            }
            Op::Add => {
                for &i in &node.inputs {
                    if needs(i) {
                        accum(self.ensure(grads, i), g.data(), S::one());
                    }
                }
            }
            Op::AddScaled(alpha) => {
                let alpha = *alpha;
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if needs(a) {
                    accum(self.ensure(grads, a), g.data(), S::one());
                }
                if needs(b) {
                    accum(self.ensure(grads, b), g.data(), alpha);
                }
            }
            Op::AddBias => {
                let (a, bias) = (node.inputs[0], node.inputs[1]);
                if needs(a) {
                    accum(self.ensure(grads, a), g.data(), S::one());
                }
                if needs(bias) {
                    let d = self.value(bias).len();
                    let gb = self.ensure(grads, bias);
                    for (i, &x) in g.data().iter().enumerate() {
                        gb.data_mut()[i % d] = gb.data_mut()[i % d] + x;
                    }
                }
            }
            Op::AddTokens => {
                let (a, t) = (node.inputs[0], node.inputs[1]);
                if needs(a) {
                    accum(self.ensure(grads, a), g.data(), S::one());
                }
                if needs(t) {
                    let td = self.value(t).len();
                    let gt = self.ensure(grads, t);
                    for (i, &x) in g.data().iter().enumerate() {
                        gt.data_mut()[i % td] = gt.data_mut()[i % td] + x;
                    }
                }
            }
            Op::AddAxis1 => {
                let (a, r) = (node.inputs[0], node.inputs[1]);
                let (b, t, d) = self.value(a).as_bmk();
                if needs(a) {
                    accum(self.ensure(grads, a), g.data(), S::one());
                }
                if needs(r) {
                    let gr = self.ensure(grads, r);
                    for bi in 0..b {
                        for ti in 0..t {
                            for di in 0..d {
                                let o = bi * d + di;
                                gr.data_mut()[o] =
                                    gr.data_mut()[o] + g.data()[(bi * t + ti) * d + di];
                            }
                        }
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let av = self.value(a).clone();
                let bv = self.value(b).clone();
                if needs(a) {
                    let ga = self.ensure(grads, a);
                    for (i, x) in ga.data_mut().iter_mut().enumerate() {
                        *x = *x + g.data()[i] * bv.data()[i];
                    }
                }
                if needs(b) {
                    let gb = self.ensure(grads, b);
                    for (i, x) in gb.data_mut().iter_mut().enumerate() {
                        *x = *x + g.data()[i] * av.data()[i];
                    }
                }
            }
            Op::MulBScalar => {
                let (a, s) = (node.inputs[0], node.inputs[1]);
                let av = self.value(a).clone();
                let sv = self.value(s).clone();
                let b = av.shape()[0];
                let per = av.len() / b;
                if needs(a) {
                    let ga = self.ensure(grads, a);
                    for (i, x) in ga.data_mut().iter_mut().enumerate() {
                        *x = *x + g.data()[i] * sv.data()[i / per];
                    }
                }
                if needs(s) {
                    let gs = self.ensure(grads, s);
                    for i in 0..av.len() {
                        let bi = i / per;
                        gs.data_mut()[bi] = gs.data_mut()[bi] + g.data()[i] * av.data()[i];
                    }
                }
            }
            Op::MulScalarNode => {
                let (a, s) = (node.inputs[0], node.inputs[1]);
                let av = self.value(a).clone();
                let sv = self.value(s).data()[0];
                if needs(a) {
                    accum(self.ensure(grads, a), g.data(), sv);
                }
                if needs(s) {
                    let dot = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .fold(S::zero(), |acc, (&gi, &ai)| acc + gi * ai);
                    let gs = self.ensure(grads, s);
                    gs.data_mut()[0] = gs.data_mut()[0] + dot;
                }
            }
            Op::AddScalarNode => {
                let (a, s) = (node.inputs[0], node.inputs[1]);
                if needs(a) {
                    accum(self.ensure(grads, a), g.data(), S::one());
                }
                if needs(s) {
                    let sum = g.data().iter().fold(S::zero(), |acc, &x| acc + x);
                    let gs = self.ensure(grads, s);
                    gs.data_mut()[0] = gs.data_mut()[0] + sum;
                }
            }
            Op::Scale(c) => {
                let c = *c;
                let a = node.inputs[0];
                if needs(a) {
                    accum(self.ensure(grads, a), g.data(), c);
                }
            }
            Op::Relu => {
                let a = node.inputs[0];
                if needs(a) {
                    let av = self.value(a).clone();
                    let ga = self.ensure(grads, a);
                    for (i, x) in ga.data_mut().iter_mut().enumerate() {
                        if av.data()[i] > S::zero() {
                            *x = *x + g.data()[i];
                        }
                    }
                }
            }
            Op::SoftmaxLast => {
                let a = node.inputs[0];
                if needs(a) {
                    let p = node.value.clone();
                    let l = *p.shape().last().unwrap();
                    let rows = p.len() / l;
                    let ga = self.ensure(grads, a);
                    for r in 0..rows {
                        let off = r * l;
                        let mut dot = S::zero();
                        for i in 0..l {
                            dot = dot + g.data()[off + i] * p.data()[off + i];
                        }
                        for i in 0..l {
                            ga.data_mut()[off + i] = ga.data_mut()[off + i]
                                + p.data()[off + i] * (g.data()[off + i] - dot);
                        }
                    }
                }
            }
            Op::LogFloor(floor) => {
                let floor = *floor;
                let a = node.inputs[0];
                if needs(a) {
                    let av = self.value(a).clone();
                    let ga = self.ensure(grads, a);
                    for (i, x) in ga.data_mut().iter_mut().enumerate() {
                        if av.data()[i] > floor {
                            *x = *x + g.data()[i] / av.data()[i];
                        }
                    }
                }
            }
            Op::LayerNorm { eps } => {
                let eps = *eps;
                let (x, gamma, beta) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let xv = self.value(x).clone();
                let gv = self.value(gamma).clone();
                let d = *xv.shape().last().unwrap();
                let rows = xv.len() / d;
                let dn = S::from_f64(d as f64);
                // recompute per-row stats
                for r in 0..rows {
                    let off = r * d;
                    let row = &xv.data()[off..off + d];
                    let mean = row.iter().fold(S::zero(), |s, &v| s + v) / dn;
                    let var = row
                        .iter()
                        .fold(S::zero(), |s, &v| s + (v - mean) * (v - mean))
                        / dn;
                    let inv = (var + eps).sqrt().recip();
                    // dxhat_i = g_i * gamma_i
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    for i in 0..d {
                        let xhat = (row[i] - mean) * inv;
                        let dxhat = g.data()[off + i] * gv.data()[i];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                    }
                    if needs(x) {
                        let gx = self.ensure(grads, x);
                        for i in 0..d {
                            let xhat = (row[i] - mean) * inv;
                            let dxhat = g.data()[off + i] * gv.data()[i];
                            let dx = (dxhat - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn)
                                * inv;
                            gx.data_mut()[off + i] = gx.data_mut()[off + i] + dx;
                        }
                    }
                    if needs(gamma) {
                        let gg = self.ensure(grads, gamma);
                        for i in 0..d {
                            let xhat = (row[i] - mean) * inv;
                            gg.data_mut()[i] = gg.data_mut()[i] + g.data()[off + i] * xhat;
                        }
                    }
                    if needs(beta) {
                        let gb = self.ensure(grads, beta);
                        for i in 0..d {
                            gb.data_mut()[i] = gb.data_mut()[i] + g.data()[off + i];
                        }
                    }
                }
            }
            Op::SumAll => {
                let a = node.inputs[0];
                if needs(a) {
                    let gv = g.data()[0];
                    let ga = self.ensure(grads, a);
                    for x in ga.data_mut() {
                        *x = *x + gv;
                    }
                }
            }
            Op::MeanAxis1 => {
                let a = node.inputs[0];
                if needs(a) {
                    let (b, t, d) = self.value(a).as_bmk();
                    let inv = S::from_f64(1.0 / t as f64);
                    let ga = self.ensure(grads, a);
                    for bi in 0..b {
                        for ti in 0..t {
                            for di in 0..d {
                                let o = (bi * t + ti) * d + di;
                                ga.data_mut()[o] =
                                    ga.data_mut()[o] + g.data()[bi * d + di] * inv;
                            }
                        }
                    }
                }
            }
            Op::Concat { axis } => {
                let axis = *axis;
                let shapes: Vec<Vec<usize>> = node
                    .inputs
                    .iter()
                    .map(|&i| self.value(i).shape().to_vec())
                    .collect();
                let out_shape = node.value.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total_axis = out_shape[axis];
                let mut off_axis = 0usize;
                for (pi, &inp) in node.inputs.iter().enumerate() {
                    let ax = shapes[pi][axis];
                    if needs(inp) {
                        let gi = self.ensure(grads, inp);
                        for o in 0..outer {
                            for a_i in 0..ax {
                                let src =
                                    (o * total_axis + off_axis + a_i) * inner;
                                let dst = (o * ax + a_i) * inner;
                                for k in 0..inner {
                                    gi.data_mut()[dst + k] =
                                        gi.data_mut()[dst + k] + g.data()[src + k];
                                }
                            }
                        }
                    }
                    off_axis += ax;
                }
            }
            Op::Slice { axis, start } => {
                let (axis, start) = (*axis, *start);
                let a = node.inputs[0];
                if needs(a) {
                    let in_shape = self.value(a).shape().to_vec();
                    let out_shape = node.value.shape().to_vec();
                    let outer: usize = in_shape[..axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let (in_ax, out_ax) = (in_shape[axis], out_shape[axis]);
                    let ga = self.ensure(grads, a);
                    for o in 0..outer {
                        for a_i in 0..out_ax {
                            let dst = (o * in_ax + start + a_i) * inner;
                            let src = (o * out_ax + a_i) * inner;
                            for k in 0..inner {
                                ga.data_mut()[dst + k] =
                                    ga.data_mut()[dst + k] + g.data()[src + k];
                            }
                        }
                    }
                }
            }
            Op::Reshape => {
                let a = node.inputs[0];
                if needs(a) {
                    accum(self.ensure(grads, a), g.data(), S::one());
                }
            }
            Op::SplitHeads { h } => {
                let h = *h;
                let a = node.inputs[0];
                if needs(a) {
                    let (b, t, d) = self.value(a).as_bmk();
                    let dh = d / h;
                    let ga = self.ensure(grads, a);
                    for bi in 0..b {
                        for hi in 0..h {
                            for ti in 0..t {
                                for j in 0..dh {
                                    let dst = (bi * t + ti) * d + hi * dh + j;
                                    let src = ((bi * h + hi) * t + ti) * dh + j;
                                    ga.data_mut()[dst] =
                                        ga.data_mut()[dst] + g.data()[src];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { h } => {
                let h = *h;
                let a = node.inputs[0];
                if needs(a) {
                    let (bh, t, dh) = self.value(a).as_bmk();
                    let b = bh / h;
                    let d = dh * h;
                    let ga = self.ensure(grads, a);
                    for bi in 0..b {
                        for hi in 0..h {
                            for ti in 0..t {
                                for j in 0..dh {
                                    let dst = ((bi * h + hi) * t + ti) * dh + j;
                                    let src = (bi * t + ti) * d + hi * dh + j;
                                    ga.data_mut()[dst] =
                                        ga.data_mut()[dst] + g.data()[src];
                                }
                            }
                        }
                    }
                }
            }
            Op::SelectLast { k } => {
                let k = *k;
                let a = node.inputs[0];
                if needs(a) {
                    let cols = self.value(a).shape()[1];
                    let ga = self.ensure(grads, a);
                    for (bi, &gv) in g.data().iter().enumerate() {
                        ga.data_mut()[bi * cols + k] = ga.data_mut()[bi * cols + k] + gv;
                    }
                }
            }
        }
    }
}

fn accum<S: Scalar>(dst: &mut Tensor<S>, src: &[S], alpha: S) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.data_mut().iter_mut().zip(src) {
        *d = *d + s * alpha;
    }
}

fn softmax_forward<S: Scalar>(x: &Tensor<S>, mask: Option<&Tensor<S>>) -> Tensor<S> {
    let l = *x.shape().last().unwrap();
    let rows = x.len() / l;
    if let Some(m) = mask {
        assert!(
            m.len() == x.len() || (x.ndim() > 1 && m.len() == x.len() / x.shape()[0]),
            "mask shape {:?} incompatible with logits {:?}",
            m.shape(),
            x.shape()
        );
    }
    let mut out = x.clone();
    for r in 0..rows {
        let off = r * l;
        let logit = |i: usize| -> S {
            let mut v = x.data()[off + i];
            if let Some(m) = mask {
                let mi = if m.len() == x.len() { off + i } else { (off + i) % m.len() };
                v = v + m.data()[mi];
            }
            v
        };
        let mut mx = S::neg_infinity();
        for i in 0..l {
            let v = logit(i);
            if v > mx {
                mx = v;
            }
        }
        let mut sum = S::zero();
        for i in 0..l {
            let e = (logit(i) - mx).exp();
            out.data_mut()[off + i] = e;
            sum = sum + e;
        }
        let inv = sum.recip();
        for i in 0..l {
            out.data_mut()[off + i] = out.data()[off + i] * inv;
        }
    }
    out
}

fn concat_forward<S: Scalar>(parts: &[&Tensor<S>], axis: usize) -> Tensor<S> {
    let rank = parts[0].ndim();
    assert!(axis < rank);
    for p in parts {
        assert_eq!(p.ndim(), rank, "concat rank mismatch");
        for a in 0..rank {
            if a != axis {
                assert_eq!(p.shape()[a], parts[0].shape()[a], "concat shape mismatch");
            }
        }
    }
    let mut out_shape = parts[0].shape().to_vec();
    out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let total_axis = out_shape[axis];
    let mut out = Tensor::zeros(out_shape.clone());
    let mut off_axis = 0usize;
    for p in parts {
        let ax = p.shape()[axis];
        for o in 0..outer {
            for a_i in 0..ax {
                let dst = (o * total_axis + off_axis + a_i) * inner;
                let src = (o * ax + a_i) * inner;
                out.data_mut()[dst..dst + inner]
                    .copy_from_slice(&p.data()[src..src + inner]);
            }
        }
        off_axis += ax;
    }
    out
}

fn slice_forward<S: Scalar>(x: &Tensor<S>, axis: usize, start: usize, len: usize) -> Tensor<S> {
    let rank = x.ndim();
    assert!(axis < rank);
    assert!(start + len <= x.shape()[axis], "slice out of range");
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let in_ax = x.shape()[axis];
    let mut out = Tensor::zeros(out_shape);
    for o in 0..outer {
        for a_i in 0..len {
            let src = (o * in_ax + start + a_i) * inner;
            let dst = (o * len + a_i) * inner;
            out.data_mut()[dst..dst + inner].copy_from_slice(&x.data()[src..src + inner]);
        }
    }
    out
}

/// Dispatch table for the four batch-broadcast layouts of matmul.
fn matmul_forward<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, nt: bool) -> Tensor<S> {
    let (ba, m, k) = a.as_bmk();
    let (bb, b0, b1) = b.as_bmk();
    let (kb, n) = if nt { (b1, b0) } else { (b0, b1) };
    assert_eq!(k, kb, "matmul inner dim mismatch: {:?} x {:?} nt={}", a.shape(), b.shape(), nt);
    let batch = ba.max(bb);
    assert!(
        ba == bb || ba == 1 || bb == 1,
        "matmul batch mismatch: {:?} x {:?}",
        a.shape(),
        b.shape()
    );
    let out_shape = if a.ndim() == 2 && b.ndim() == 2 {
        vec![m, n]
    } else {
        vec![batch, m, n]
    };
    let mut out = Tensor::zeros(out_shape);
    let (rsb, csb) = if nt { (1isize, k as isize) } else { (n as isize, 1isize) };
    for bi in 0..batch {
        let ap = &a.data()[if ba == 1 { 0 } else { bi * m * k }..];
        let bp = &b.data()[if bb == 1 { 0 } else { bi * b0 * b1 }..];
        let cp = &mut out.data_mut()[bi * m * n..];
        unsafe {
            S::gemm(
                m,
                k,
                n,
                S::one(),
                ap.as_ptr(),
                k as isize,
                1,
                bp.as_ptr(),
                rsb,
                csb,
                S::zero(),
                cp.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    out
}

/// dA = dC @ B_eff^T, accumulated (handles shared-lhs broadcast).
fn matmul_backward_a<S: Scalar>(g: &Tensor<S>, b: &Tensor<S>, nt: bool, ga: &mut Tensor<S>) {
    let (bg, m, n) = g.as_bmk();
    let (bb, b0, b1) = b.as_bmk();
    let k = if nt { b1 } else { b0 };
    let (ba, _, _) = ga.as_bmk();
    // B_eff^T is (n, k): stored (k, n) -> strides (1, n); stored-nt (n, k) -> (k, 1)
    let (rsb, csb) = if nt { (k as isize, 1isize) } else { (1isize, n as isize) };
    for bi in 0..bg {
        let gp = &g.data()[bi * m * n..];
        let bp = &b.data()[if bb == 1 { 0 } else { bi * b0 * b1 }..];
        let ap = &mut ga.data_mut()[if ba == 1 { 0 } else { bi * m * k }..];
        unsafe {
            S::gemm(
                m,
                n,
                k,
                S::one(),
                gp.as_ptr(),
                n as isize,
                1,
                bp.as_ptr(),
                rsb,
                csb,
                S::one(),
                ap.as_mut_ptr(),
                k as isize,
                1,
            );
        }
    }
}

/// dB for C = A @ B_eff: stored-normal dB = A^T dC; stored-nt dB = dC^T A.
fn matmul_backward_b<S: Scalar>(g: &Tensor<S>, a: &Tensor<S>, nt: bool, gb: &mut Tensor<S>) {
    let (bg, m, n) = g.as_bmk();
    let (ba, _, k) = a.as_bmk();
    let (bb, _, _) = gb.as_bmk();
    for bi in 0..bg {
        let gp = &g.data()[bi * m * n..];
        let ap = &a.data()[if ba == 1 { 0 } else { bi * m * k }..];
        let off_b = if bb == 1 { 0 } else { bi * gb.len() / bb };
        let bp = &mut gb.data_mut()[off_b..];
        unsafe {
            if nt {
                // stored b is (n, k): dB = dC^T (n, m) @ A (m, k)
                S::gemm(
                    n,
                    m,
                    k,
                    S::one(),
                    gp.as_ptr(),
                    1,
                    n as isize,
                    ap.as_ptr(),
                    k as isize,
                    1,
                    S::one(),
                    bp.as_mut_ptr(),
                    k as isize,
                    1,
                );
            } else {
                // stored b is (k, n): dB = A^T (k, m) @ dC (m, n)
                S::gemm(
                    k,
                    m,
                    n,
                    S::one(),
                    ap.as_ptr(),
                    1,
                    k as isize,
                    gp.as_ptr(),
                    n as isize,
                    1,
                    S::one(),
                    bp.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    }
}
