//! Parameter registry plus the transformer building blocks shared by every
//! model component. Parameters live outside any tape; a [`Session`] binds
//! them lazily into a fresh tape per forward pass, so construction order
//! gives stable ids and checkpoints address tensors by name.

use std::collections::BTreeMap;

use rand::Rng;

use crate::scalar::Scalar;
use crate::tape::{Grads, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

pub struct Params<S> {
    entries: Vec<(String, Tensor<S>)>,
    index: BTreeMap<String, usize>,
}

impl<S: Scalar> Default for Params<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Params<S> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: BTreeMap::new() }
    }

    /// Returns the existing entry under `name` (shape-checked) or inserts the
    /// tensor produced by `init`. Checkpoint-restored values therefore
    /// survive model construction.
    pub fn get_or_init(
        &mut self,
        name: &str,
        shape: &[usize],
        init: impl FnOnce() -> Tensor<S>,
    ) -> ParamId {
        if let Some(&i) = self.index.get(name) {
            assert_eq!(
                self.entries[i].1.shape(),
                shape,
                "param {name} shape mismatch"
            );
            return ParamId(i);
        }
        let t = init();
        assert_eq!(t.shape(), shape, "init for {name} produced wrong shape");
        self.entries.push((name.to_string(), t));
        self.index.insert(name.to_string(), self.entries.len() - 1);
        ParamId(self.entries.len() - 1)
    }

    pub fn insert_raw(&mut self, name: &str, t: Tensor<S>) {
        assert!(!self.index.contains_key(name), "duplicate param {name}");
        self.entries.push((name.to_string(), t));
        self.index.insert(name.to_string(), self.entries.len() - 1);
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].1
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// One forward pass: a tape plus the lazy param→node binding for it.
pub struct Session<'p, S: Scalar> {
    pub tape: Tape<S>,
    params: &'p Params<S>,
    bound: Vec<Option<NodeId>>,
}

impl<'p, S: Scalar> Session<'p, S> {
    pub fn new(params: &'p Params<S>) -> Self {
        Self { tape: Tape::new(), params, bound: vec![None; params.len()] }
    }

    /// Bind a parameter into the tape (first use creates the leaf).
    pub fn p(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.bound[id.0] {
            return n;
        }
        let n = self.tape.param(self.params.value(id).clone());
        self.bound[id.0] = Some(n);
        n
    }

    /// Collect gradients for every parameter bound during this pass.
    pub fn param_grads(&self, grads: &Grads<S>) -> Vec<(ParamId, Tensor<S>)> {
        let mut out = Vec::new();
        for (i, slot) in self.bound.iter().enumerate() {
            if let Some(nid) = slot {
                if let Some(g) = grads.get(*nid) {
                    out.push((ParamId(i), g.clone()));
                }
            }
        }
        out
    }

    /// Broadcast a (1, Q, D) node to (b, Q, D) by stacking references; the
    /// backward pass accumulates all copies into the single source.
    pub fn tile_axis0(&mut self, node: NodeId, b: usize) -> NodeId {
        assert_eq!(self.tape.value(node).shape()[0], 1);
        if b == 1 {
            return node;
        }
        let parts = vec![node; b];
        self.tape.concat(&parts, 0)
    }
}

fn uniform_tensor<S: Scalar>(rng: &mut impl Rng, shape: Vec<usize>, limit: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n)
        .map(|_| S::from_f64(rng.random_range(-limit..limit)))
        .collect();
    Tensor::new(shape, data)
}

pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    d_in: usize,
    d_out: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        params: &mut Params<S>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = params.get_or_init(&format!("{name}.w"), &[d_in, d_out], || {
            uniform_tensor(rng, vec![d_in, d_out], limit)
        });
        let b = bias.then(|| {
            params.get_or_init(&format!("{name}.b"), &[d_out], || {
                Tensor::zeros(vec![d_out])
            })
        });
        Self { w, b, d_in, d_out }
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: NodeId) -> NodeId {
        assert_eq!(
            *s.tape.value(x).shape().last().unwrap(),
            self.d_in,
            "linear input dim mismatch"
        );
        let w = self.p_w(s);
        let y = s.tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let bn = s.p(b);
                s.tape.add_bias(y, bn)
            }
            None => y,
        }
    }

    fn p_w<S: Scalar>(&self, s: &mut Session<S>) -> NodeId {
        s.p(self.w)
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    eps: f64,
}

impl LayerNorm {
    pub fn new<S: Scalar>(params: &mut Params<S>, name: &str, d: usize) -> Self {
        let gamma = params.get_or_init(&format!("{name}.g"), &[d], || {
            Tensor::filled(vec![d], S::one())
        });
        let beta =
            params.get_or_init(&format!("{name}.b"), &[d], || Tensor::zeros(vec![d]));
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: NodeId) -> NodeId {
        let g = s.p(self.gamma);
        let b = s.p(self.beta);
        s.tape.layernorm(x, g, b, S::from_f64(self.eps))
    }
}

pub struct MhaOut {
    pub out: NodeId,
    /// post-softmax attention, shape (B*heads, Tq, Tk)
    pub probs: NodeId,
}

pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    pub heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(
        params: &mut Params<S>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(dim % heads, 0);
        Self {
            wq: Linear::new(params, rng, &format!("{name}.q"), dim, dim, true),
            wk: Linear::new(params, rng, &format!("{name}.k"), dim, dim, true),
            wv: Linear::new(params, rng, &format!("{name}.v"), dim, dim, true),
            wo: Linear::new(params, rng, &format!("{name}.o"), dim, dim, true),
            heads,
            dim,
        }
    }

    /// `q_in` (B, Tq, D) attends over `kv_in` (B, Tk, D). The mask (additive,
    /// -inf for blocked) is either (Tq, Tk), shared across the batch, or
    /// pre-tiled to (B*heads, Tq, Tk).
    pub fn forward<S: Scalar>(
        &self,
        s: &mut Session<S>,
        q_in: NodeId,
        kv_in: NodeId,
        mask: Option<Tensor<S>>,
    ) -> MhaOut {
        let dh = self.dim / self.heads;
        let q = self.wq.forward(s, q_in);
        let k = self.wk.forward(s, kv_in);
        let v = self.wv.forward(s, kv_in);
        let qh = s.tape.split_heads(q, self.heads);
        let kh = s.tape.split_heads(k, self.heads);
        let vh = s.tape.split_heads(v, self.heads);
        let logits = s.tape.matmul_nt(qh, kh);
        let scaled = s.tape.scale(logits, S::from_f64(1.0 / (dh as f64).sqrt()));
        let probs = s.tape.softmax_last(scaled, mask);
        let ctx = s.tape.matmul(probs, vh);
        let merged = s.tape.merge_heads(ctx, self.heads);
        let out = self.wo.forward(s, merged);
        MhaOut { out, probs }
    }
}

pub struct Ffn {
    l1: Linear,
    l2: Linear,
}

impl Ffn {
    pub fn new<S: Scalar>(
        params: &mut Params<S>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            l1: Linear::new(params, rng, &format!("{name}.1"), dim, hidden, true),
            l2: Linear::new(params, rng, &format!("{name}.2"), hidden, dim, true),
        }
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: NodeId) -> NodeId {
        let h = self.l1.forward(s, x);
        let h = s.tape.relu(h);
        self.l2.forward(s, h)
    }
}

/// Pre-LN self-attention block: x + attn(ln(x)), then x + ffn(ln(x)).
pub struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: Ffn,
}

impl EncoderBlock {
    pub fn new<S: Scalar>(
        params: &mut Params<S>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(params, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(params, rng, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(params, &format!("{name}.ln2"), dim),
            ffn: Ffn::new(params, rng, &format!("{name}.ffn"), dim, dim * 4),
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        s: &mut Session<S>,
        x: NodeId,
        mask: Option<Tensor<S>>,
    ) -> (NodeId, NodeId) {
        let n = self.ln1.forward(s, x);
        let a = self.attn.forward(s, n, n, mask);
        let x = s.tape.add(x, a.out);
        let n = self.ln2.forward(s, x);
        let f = self.ffn.forward(s, n);
        (s.tape.add(x, f), a.probs)
    }
}

/// Learned-query attention pooling: Q fixed queries summarize (B, T, D)
/// tokens into (B, Q, D).
pub struct AttnPool {
    pub queries: ParamId,
    attn: MultiHeadAttention,
    n_queries: usize,
}

impl AttnPool {
    pub fn new<S: Scalar>(
        params: &mut Params<S>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        n_queries: usize,
    ) -> Self {
        let limit = (1.0 / dim as f64).sqrt();
        let queries = params.get_or_init(&format!("{name}.query"), &[1, n_queries, dim], || {
            uniform_tensor(rng, vec![1, n_queries, dim], limit)
        });
        Self {
            queries,
            attn: MultiHeadAttention::new(params, rng, &format!("{name}.attn"), dim, heads),
            n_queries,
        }
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, tokens: NodeId) -> MhaOut {
        let b = s.tape.value(tokens).shape()[0];
        let q = s.p(self.queries);
        let q = s.tile_axis0(q, b);
        self.attn.forward(s, q, tokens, None)
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }
}
