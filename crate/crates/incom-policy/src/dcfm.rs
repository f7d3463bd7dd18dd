//! Flow-matching action heads. Three decoder topologies sit behind one trait:
//! `dcfm` runs separate base/arm branches that exchange a per-layer summary
//! token under stop-gradient, `sequential` conditions the arm branch on the
//! finished base stream, and `shared` decodes both action groups from one
//! token stream.

use incom_core::nn::{
    AttnPool, Ffn, LayerNorm, Linear, MultiHeadAttention, ParamId, Params, Session,
};
use incom_core::tensor::Tensor;
use incom_core::{NodeId, Scalar};
use rand::Rng;

use crate::config::PolicyConfig;
use crate::feat;
use crate::PolicyError;

// ---- flow primitives -------------------------------------------------------

/// a_t = (1-t) a0 + t a1. Rejects t outside [0,1].
pub fn flow_interpolate<S: Scalar>(
    a0: &Tensor<S>,
    a1: &Tensor<S>,
    t: f64,
) -> Result<Tensor<S>, PolicyError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(PolicyError::TimeOutOfRange(t));
    }
    assert_eq!(a0.shape(), a1.shape(), "endpoint shape mismatch");
    let (w0, w1) = (S::from_f64(1.0 - t), S::from_f64(t));
    let data = a0.data().iter().zip(a1.data()).map(|(&x, &y)| w0 * x + w1 * y).collect();
    Ok(Tensor::new(a0.shape().to_vec(), data))
}

/// Straight-path target velocity u = a1 - a0.
pub fn velocity_target<S: Scalar>(a0: &Tensor<S>, a1: &Tensor<S>) -> Tensor<S> {
    assert_eq!(a0.shape(), a1.shape(), "endpoint shape mismatch");
    let data = a0.data().iter().zip(a1.data()).map(|(&x, &y)| y - x).collect();
    Tensor::new(a0.shape().to_vec(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// plain sum of squared errors over everything (the per-sample form)
    Sum,
    /// sum divided by batch size
    BatchMean,
}

/// Sum over both branches of ||v - u||^2 under the chosen reduction.
pub fn flow_loss<S: Scalar>(
    s: &mut Session<S>,
    out: &BranchOut,
    u_base: NodeId,
    u_arm: NodeId,
    reduction: Reduction,
) -> NodeId {
    let b = s.tape.value(out.v_base).shape()[0];
    let lb = s.tape.sse(out.v_base, u_base);
    let la = s.tape.sse(out.v_arm, u_arm);
    let l = s.tape.add(lb, la);
    match reduction {
        Reduction::Sum => l,
        Reduction::BatchMean => s.tape.scale(l, S::from_f64(1.0 / b as f64)),
    }
}

// ---- condition assembly ----------------------------------------------------

/// Builds the conditioning sequence c = [aggregated perception tokens,
/// proprio token, embedded action-history tokens].
pub struct ConditionBuilder {
    proprio: Linear,
    hist: Linear,
    hist_pos: ParamId,
    proprio_scale: Vec<f64>,
    h_hist: usize,
    d_act: usize,
}

impl ConditionBuilder {
    pub fn new<S: Scalar>(
        params: &mut Params<S>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &PolicyConfig,
    ) -> Self {
        let d = cfg.d_model;
        let hist_pos = params.get_or_init(&format!("{name}.histpos"), &[cfg.h_hist, d], || {
            let lim = (1.0 / d as f64).sqrt();
            let data =
                (0..cfg.h_hist * d).map(|_| S::from_f64(rng.random_range(-lim..lim))).collect();
            Tensor::new(vec![cfg.h_hist, d], data)
        });
        Self {
            proprio: Linear::new(params, rng, &format!("{name}.proprio"), cfg.proprio_dim, d, true),
            hist: Linear::new(params, rng, &format!("{name}.hist"), cfg.action_dim(), d, true),
            hist_pos,
            proprio_scale: cfg.proprio_scale.clone(),
            h_hist: cfg.h_hist,
            d_act: cfg.action_dim(),
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        s: &mut Session<S>,
        agg: NodeId,
        proprio: &[&[f32]],
        history: &[&[f32]],
    ) -> NodeId {
        let b = proprio.len();
        assert_eq!(history.len(), b);
        let p_dim = self.proprio_scale.len();
        let mut pdata = Vec::with_capacity(b * p_dim);
        for row in proprio {
            assert_eq!(row.len(), p_dim, "proprio size mismatch");
            for (i, &v) in row.iter().enumerate() {
                pdata.push(S::from_f64(v as f64 / self.proprio_scale[i]));
            }
        }
        let p = s.tape.constant(Tensor::new(vec![b, p_dim], pdata));
        let p = self.proprio.forward(s, p);
        let d = s.tape.value(p).shape()[1];
        let p_tok = s.tape.reshape(p, vec![b, 1, d]);

        let mut hdata = Vec::with_capacity(b * self.h_hist * self.d_act);
        for row in history {
            assert_eq!(row.len(), self.h_hist * self.d_act, "history size mismatch");
            hdata.extend(row.iter().map(|&v| S::from_f64(v as f64)));
        }
        let hist = s.tape.constant(Tensor::new(vec![b, self.h_hist, self.d_act], hdata));
        let mut h_tok = self.hist.forward(s, hist);
        let pos = s.p(self.hist_pos);
        h_tok = s.tape.add_tokens(h_tok, pos);

        s.tape.concat(&[agg, p_tok, h_tok], 1)
    }
}

// ---- decoder topologies ----------------------------------------------------

pub struct FlowInput {
    /// (B, T_p, d_base) noised base actions
    pub a_base: NodeId,
    /// (B, T_p, d_arm) noised arm actions
    pub a_arm: NodeId,
    /// (B, 2*n_freq) sinusoidal features of the flow time
    pub t_feats: NodeId,
    /// (B, T_c, D) conditioning tokens
    pub c: NodeId,
}

pub struct BranchOut {
    pub v_base: NodeId,
    pub v_arm: NodeId,
}

/// Object-safe velocity predictor; the two entry points run the same generic
/// implementation at the scalar type of the caller's session.
pub trait VelocityHead: Send + Sync {
    fn name(&self) -> &'static str;
    fn predict32(&self, s: &mut Session<f32>, inp: &FlowInput) -> BranchOut;
    fn predict64(&self, s: &mut Session<f64>, inp: &FlowInput) -> BranchOut;
}

/// Scalar-directed dispatch so generic model code can call a `dyn
/// VelocityHead` without knowing its concrete scalar at compile time.
pub trait SessionScalar: Scalar {
    fn predict(topo: &dyn VelocityHead, s: &mut Session<Self>, inp: &FlowInput) -> BranchOut;
}

impl SessionScalar for f32 {
    fn predict(topo: &dyn VelocityHead, s: &mut Session<Self>, inp: &FlowInput) -> BranchOut {
        topo.predict32(s, inp)
    }
}

impl SessionScalar for f64 {
    fn predict(topo: &dyn VelocityHead, s: &mut Session<Self>, inp: &FlowInput) -> BranchOut {
        topo.predict64(s, inp)
    }
}

pub fn predict<S: SessionScalar>(
    topo: &dyn VelocityHead,
    s: &mut Session<S>,
    inp: &FlowInput,
) -> BranchOut {
    S::predict(topo, s, inp)
}

struct DecoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross: MultiHeadAttention,
    peer: Option<(LayerNorm, MultiHeadAttention)>,
    pool: Option<AttnPool>,
    lnf: LayerNorm,
    ffn: Ffn,
}

impl DecoderLayer {
    fn new<S: Scalar>(
        params: &mut Params<S>,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        heads: usize,
        with_peer: bool,
        with_pool: bool,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(params, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(params, rng, &format!("{name}.self"), d, heads),
            ln2: LayerNorm::new(params, &format!("{name}.ln2"), d),
            cross: MultiHeadAttention::new(params, rng, &format!("{name}.cross"), d, heads),
            peer: with_peer.then(|| {
                (
                    LayerNorm::new(params, &format!("{name}.ln3"), d),
                    MultiHeadAttention::new(params, rng, &format!("{name}.peer"), d, heads),
                )
            }),
            pool: with_pool
                .then(|| AttnPool::new(params, rng, &format!("{name}.sum"), d, heads, 1)),
            lnf: LayerNorm::new(params, &format!("{name}.lnf"), d),
            ffn: Ffn::new(params, rng, &format!("{name}.ffn"), d, d * 4),
        }
    }

    /// self-attention over the chunk, then cross-attention into the condition
    fn pre<S: Scalar>(&self, s: &mut Session<S>, x: NodeId, c: NodeId) -> NodeId {
        let n = self.ln1.forward(s, x);
        let a = self.attn.forward(s, n, n, None);
        let x = s.tape.add(x, a.out);
        let n = self.ln2.forward(s, x);
        let a = self.cross.forward(s, n, c, None);
        s.tape.add(x, a.out)
    }

    /// this branch's summary token offered to the peer, (B, 1, D)
    fn summary<S: Scalar>(&self, s: &mut Session<S>, x: NodeId) -> NodeId {
        self.pool.as_ref().expect("layer built without summary pool").forward(s, x).out
    }

    fn cross_peer<S: Scalar>(&self, s: &mut Session<S>, x: NodeId, peer: NodeId) -> NodeId {
        let (ln, attn) = self.peer.as_ref().expect("layer built without peer attention");
        let n = ln.forward(s, x);
        let a = attn.forward(s, n, peer, None);
        s.tape.add(x, a.out)
    }

    fn post<S: Scalar>(&self, s: &mut Session<S>, x: NodeId) -> NodeId {
        let n = self.lnf.forward(s, x);
        let f = self.ffn.forward(s, n);
        s.tape.add(x, f)
    }
}

struct Branch {
    embed: Linear,
    pos: ParamId,
    time: Linear,
    layers: Vec<DecoderLayer>,
    ln_out: LayerNorm,
    head: Linear,
}

impl Branch {
    fn new<S: Scalar>(
        params: &mut Params<S>,
        rng: &mut impl Rng,
        name: &str,
        d_act: usize,
        cfg: &PolicyConfig,
        with_peer: bool,
        with_pool: bool,
    ) -> Self {
        let d = cfg.d_model;
        let pos = params.get_or_init(&format!("{name}.pos"), &[cfg.t_p, d], || {
            let lim = (1.0 / d as f64).sqrt();
            let data =
                (0..cfg.t_p * d).map(|_| S::from_f64(rng.random_range(-lim..lim))).collect();
            Tensor::new(vec![cfg.t_p, d], data)
        });
        let layers = (0..cfg.decoder_layers)
            .map(|i| {
                DecoderLayer::new(
                    params,
                    rng,
                    &format!("{name}.l{i}"),
                    d,
                    cfg.heads,
                    with_peer,
                    with_pool,
                )
            })
            .collect();
        Self {
            embed: Linear::new(params, rng, &format!("{name}.embed"), d_act, d, true),
            pos,
            time: Linear::new(
                params,
                rng,
                &format!("{name}.time"),
                feat::sin_feature_dim(1, cfg.n_freq),
                d,
                true,
            ),
            layers,
            ln_out: LayerNorm::new(params, &format!("{name}.lnout"), d),
            head: Linear::new(params, rng, &format!("{name}.head"), d, d_act, true),
        }
    }

    fn tokens<S: Scalar>(&self, s: &mut Session<S>, a: NodeId, t_feats: NodeId) -> NodeId {
        let x = self.embed.forward(s, a);
        let pos = s.p(self.pos);
        let x = s.tape.add_tokens(x, pos);
        let te = self.time.forward(s, t_feats);
        let (b, d) = {
            let sh = s.tape.value(te).shape();
            (sh[0], sh[1])
        };
        let te = s.tape.reshape(te, vec![b, 1, d]);
        s.tape.add_axis1(x, te)
    }

    fn out<S: Scalar>(&self, s: &mut Session<S>, x: NodeId) -> NodeId {
        let n = self.ln_out.forward(s, x);
        self.head.forward(s, n)
    }
}

/// Bidirectional topology: per layer each branch pools a summary token and the
/// other branch cross-attends to it behind stop-gradient, so coordination is
/// forward-only and neither branch trains through the other.
pub struct DcfmTopology {
    base: Branch,
    arm: Branch,
    exchange: bool,
}

/// How the dcfm exchange sources the summaries the peers attend to: pooled
/// live from the current streams (behind stop-gradient), or injected as
/// captured constants. Freezing reproduces the sg semantics under finite
/// differences, where a live recomputation would leak the forward-only path
/// into the numeric derivative.
pub enum ExchangeMode<'a, S> {
    Live,
    Frozen(&'a [Tensor<S>]),
}

impl DcfmTopology {
    pub fn new<S: Scalar>(
        params: &mut Params<S>,
        rng: &mut impl Rng,
        cfg: &PolicyConfig,
        exchange: bool,
    ) -> Self {
        Self {
            base: Branch::new(params, rng, "dcfm.base", cfg.d_base, cfg, true, true),
            arm: Branch::new(params, rng, "dcfm.arm", cfg.d_arm, cfg, true, true),
            exchange,
        }
    }

    /// Forward with explicit control over the exchanged summaries. Live runs
    /// also return the per-layer summary values [base_0, arm_0, base_1, ...]
    /// so a caller can replay the exact computation with them frozen.
    pub fn run_with<S: Scalar>(
        &self,
        s: &mut Session<S>,
        inp: &FlowInput,
        mode: ExchangeMode<S>,
    ) -> (BranchOut, Vec<Tensor<S>>) {
        let mut xb = self.base.tokens(s, inp.a_base, inp.t_feats);
        let mut xa = self.arm.tokens(s, inp.a_arm, inp.t_feats);
        let mut captured = Vec::new();
        for (li, (bl, al)) in self.base.layers.iter().zip(&self.arm.layers).enumerate() {
            xb = bl.pre(s, xb, inp.c);
            xa = al.pre(s, xa, inp.c);
            if self.exchange {
                let (sb, sa) = match &mode {
                    ExchangeMode::Live => {
                        let sb = bl.summary(s, xb);
                        let sa = al.summary(s, xa);
                        captured.push(s.tape.value(sb).clone());
                        captured.push(s.tape.value(sa).clone());
                        (s.tape.stop_grad(sb), s.tape.stop_grad(sa))
                    }
                    ExchangeMode::Frozen(sums) => (
                        s.tape.constant(sums[2 * li].clone()),
                        s.tape.constant(sums[2 * li + 1].clone()),
                    ),
                };
                xb = bl.cross_peer(s, xb, sa);
                xa = al.cross_peer(s, xa, sb);
            }
            xb = bl.post(s, xb);
            xa = al.post(s, xa);
        }
        (BranchOut { v_base: self.base.out(s, xb), v_arm: self.arm.out(s, xa) }, captured)
    }

    fn run<S: Scalar>(&self, s: &mut Session<S>, inp: &FlowInput) -> BranchOut {
        self.run_with(s, inp, ExchangeMode::Live).0
    }
}

impl VelocityHead for DcfmTopology {
    fn name(&self) -> &'static str {
        "dcfm"
    }
    fn predict32(&self, s: &mut Session<f32>, inp: &FlowInput) -> BranchOut {
        self.run(s, inp)
    }
    fn predict64(&self, s: &mut Session<f64>, inp: &FlowInput) -> BranchOut {
        self.run(s, inp)
    }
}

/// Single decoder over concatenated action channels.
pub struct SharedTopology {
    trunk: Branch,
    d_base: usize,
    d_arm: usize,
}

impl SharedTopology {
    pub fn new<S: Scalar>(params: &mut Params<S>, rng: &mut impl Rng, cfg: &PolicyConfig) -> Self {
        Self {
            trunk: Branch::new(params, rng, "dcfm.shared", cfg.action_dim(), cfg, false, false),
            d_base: cfg.d_base,
            d_arm: cfg.d_arm,
        }
    }

    fn run<S: Scalar>(&self, s: &mut Session<S>, inp: &FlowInput) -> BranchOut {
        let a = s.tape.concat(&[inp.a_base, inp.a_arm], 2);
        let mut x = self.trunk.tokens(s, a, inp.t_feats);
        for l in &self.trunk.layers {
            x = l.pre(s, x, inp.c);
            x = l.post(s, x);
        }
        let v = self.trunk.out(s, x);
        BranchOut {
            v_base: s.tape.slice(v, 2, 0, self.d_base),
            v_arm: s.tape.slice(v, 2, self.d_base, self.d_arm),
        }
    }
}

impl VelocityHead for SharedTopology {
    fn name(&self) -> &'static str {
        "shared"
    }
    fn predict32(&self, s: &mut Session<f32>, inp: &FlowInput) -> BranchOut {
        self.run(s, inp)
    }
    fn predict64(&self, s: &mut Session<f64>, inp: &FlowInput) -> BranchOut {
        self.run(s, inp)
    }
}

/// One-directional hierarchy: the base branch decodes alone, the arm branch
/// additionally cross-attends to the finished base token stream (with
/// gradient, unlike the dcfm exchange).
pub struct SequentialTopology {
    base: Branch,
    arm: Branch,
}

impl SequentialTopology {
    pub fn new<S: Scalar>(params: &mut Params<S>, rng: &mut impl Rng, cfg: &PolicyConfig) -> Self {
        Self {
            base: Branch::new(params, rng, "dcfm.base", cfg.d_base, cfg, false, false),
            arm: Branch::new(params, rng, "dcfm.arm", cfg.d_arm, cfg, true, false),
        }
    }

    fn run<S: Scalar>(&self, s: &mut Session<S>, inp: &FlowInput) -> BranchOut {
        let mut xb = self.base.tokens(s, inp.a_base, inp.t_feats);
        for l in &self.base.layers {
            xb = l.pre(s, xb, inp.c);
            xb = l.post(s, xb);
        }
        let mut xa = self.arm.tokens(s, inp.a_arm, inp.t_feats);
        for l in &self.arm.layers {
            xa = l.pre(s, xa, inp.c);
            xa = l.cross_peer(s, xa, xb);
            xa = l.post(s, xa);
        }
        BranchOut { v_base: self.base.out(s, xb), v_arm: self.arm.out(s, xa) }
    }
}

impl VelocityHead for SequentialTopology {
    fn name(&self) -> &'static str {
        "sequential"
    }
    fn predict32(&self, s: &mut Session<f32>, inp: &FlowInput) -> BranchOut {
        self.run(s, inp)
    }
    fn predict64(&self, s: &mut Session<f64>, inp: &FlowInput) -> BranchOut {
        self.run(s, inp)
    }
}

pub const TOPOLOGIES: [&str; 3] = ["dcfm", "shared", "sequential"];

pub fn build_topology<S: Scalar>(
    name: &str,
    params: &mut Params<S>,
    rng: &mut impl Rng,
    cfg: &PolicyConfig,
) -> Result<Box<dyn VelocityHead>, PolicyError> {
    match name {
        "dcfm" => Ok(Box::new(DcfmTopology::new(params, rng, cfg, true))),
        "shared" => Ok(Box::new(SharedTopology::new(params, rng, cfg))),
        "sequential" => Ok(Box::new(SequentialTopology::new(params, rng, cfg))),
        other => Err(PolicyError::UnknownTopology(other.to_string())),
    }
}

// ---- sampling ---------------------------------------------------------------

/// Euler integration of the learned velocity field from Gaussian noise,
/// t_k = k/steps, finishing with a clamp to the normalized action box.
/// Returns (base (B, T_p, d_base), arm (B, T_p, d_arm)).
pub fn sample_actions(
    s: &mut Session<f32>,
    topo: &dyn VelocityHead,
    c: NodeId,
    t_p: usize,
    d_base: usize,
    d_arm: usize,
    steps: usize,
    n_freq: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Tensor<f32>), PolicyError> {
    if steps == 0 {
        return Err(PolicyError::Input("sampler needs steps >= 1".into()));
    }
    let b = s.tape.value(c).shape()[0];
    let mut ab = incom_core::rng::normal_vec(rng, b * t_p * d_base, 0.0, 1.0);
    let mut aa = incom_core::rng::normal_vec(rng, b * t_p * d_arm, 0.0, 1.0);
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let t_feats = s.tape.constant(feat::time_features(&vec![t; b], n_freq));
        let a_base = s.tape.constant(Tensor::from_f64_slice(vec![b, t_p, d_base], &ab));
        let a_arm = s.tape.constant(Tensor::from_f64_slice(vec![b, t_p, d_arm], &aa));
        let out = topo.predict32(s, &FlowInput { a_base, a_arm, t_feats, c });
        for (x, &v) in ab.iter_mut().zip(s.tape.value(out.v_base).data()) {
            *x += v as f64 * dt;
        }
        for (x, &v) in aa.iter_mut().zip(s.tape.value(out.v_arm).data()) {
            *x += v as f64 * dt;
        }
    }
    for x in ab.iter_mut().chain(aa.iter_mut()) {
        *x = x.clamp(-1.0, 1.0);
    }
    Ok((
        Tensor::from_f64_slice(vec![b, t_p, d_base], &ab),
        Tensor::from_f64_slice(vec![b, t_p, d_arm], &aa),
    ))
}
