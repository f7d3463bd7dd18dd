//! Full policy assembly: encoders -> cross-modal fusion -> gated pyramid
//! aggregation -> conditioned flow-matching decoder. Ablation variants swap
//! individual stages for simpler stand-ins while keeping the rest intact.

use incom_core::nn::{AttnPool, MultiHeadAttention, Params, Session};
use incom_core::rng::{seeded, stream};
use incom_core::tensor::Tensor;
use incom_core::{NodeId, Scalar};
use rand::Rng;

use crate::config::PolicyConfig;
use crate::darm::{affinity, align_kl, transport_log_plan, AlignStats, FuseLevel};
use crate::dcfm::{
    build_topology, flow_interpolate, flow_loss, predict, sample_actions, velocity_target,
    BranchOut, ConditionBuilder, FlowInput, Reduction, SessionScalar, VelocityHead,
};
use crate::encoders::{ImageEncoder, PointEncoder, LEVELS};
use crate::feat;
use crate::idppm::{activity_stats, aggregate_pyramid, scale_loss, target_weights, Idppm};
use crate::PolicyError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    WoIdppm,
    WoWeights,
    WoDarm,
    WoDcfmShared,
    WoDcfmSequential,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoIdppm => "wo-idppm",
            Variant::WoWeights => "wo-weights",
            Variant::WoDarm => "wo-darm",
            Variant::WoDcfmShared => "wo-dcfm-shared",
            Variant::WoDcfmSequential => "wo-dcfm-sequential",
        }
    }

    pub fn parse(name: &str) -> Result<Self, PolicyError> {
        Self::all()
            .iter()
            .copied()
            .find(|v| v.name() == name)
            .ok_or_else(|| PolicyError::UnknownVariant(name.to_string()))
    }

    pub fn all() -> [Variant; 6] {
        [
            Variant::Full,
            Variant::WoIdppm,
            Variant::WoWeights,
            Variant::WoDarm,
            Variant::WoDcfmShared,
            Variant::WoDcfmSequential,
        ]
    }
}

/// One observation as the model consumes it. Actions in `history` are already
/// normalized to [-1, 1] (oldest first, front-padded with zeros when fewer
/// than H are available).
#[derive(Clone, Debug, Default)]
pub struct ObsInput {
    pub images: Vec<f32>,
    pub points: Vec<f32>,
    pub proprio: Vec<f32>,
    pub history: Vec<f32>,
    pub valid_hist: usize,
}

/// Training sample: observation plus the normalized future action chunk
/// (T_p rows of action_dim).
#[derive(Clone, Debug)]
pub struct Sample {
    pub obs: ObsInput,
    pub chunk: Vec<f32>,
}

enum Fusion {
    Darm { levels: Vec<FuseLevel> },
    Plain { xattn: Vec<MultiHeadAttention> },
}

enum Gating {
    Learned { idppm: Idppm, pools: [AttnPool; LEVELS] },
    Uniform { pools: [AttnPool; LEVELS] },
    SingleScale { pool: AttnPool },
}

pub struct InComModel {
    pub cfg: PolicyConfig,
    pub variant: Variant,
    img: ImageEncoder,
    pts: PointEncoder,
    fusion: Fusion,
    gating: Gating,
    cond: ConditionBuilder,
    topo: Box<dyn VelocityHead>,
}

/// How the alignment loss treats the transport plan: compute it live from the
/// current geometric affinities, reuse frozen per-level log plans (the sg(T*)
/// semantics made explicit, used by finite-difference checks), or skip the
/// loss entirely.
pub enum AlignSpec<'a> {
    Off,
    Live,
    Frozen(&'a [Tensor<f64>]),
}

pub struct Perception {
    pub c: NodeId,
    pub w: Option<NodeId>,
    pub l_align: Option<NodeId>,
    pub align_stats: Option<AlignStats>,
    /// per-level log plans captured when align is Live
    pub log_plans: Option<Vec<Tensor<f64>>>,
    /// per-level image self-attention maps (B*heads, M_k, M_k)
    pub attn: [NodeId; LEVELS],
}

pub struct TrainOutput {
    pub l_flow: NodeId,
    pub l_scale: NodeId,
    pub l_align: NodeId,
    pub w: Option<NodeId>,
    pub sinkhorn_iterations: usize,
    pub sinkhorn_marginal_error: f64,
    /// per-level log plans when align was Live (reusable via AlignSpec::Frozen)
    pub log_plans: Option<Vec<Tensor<f64>>>,
}

pub struct EvalOutput {
    /// T_p normalized action rows
    pub chunk: Vec<Vec<f32>>,
    pub w: Option<[f32; 3]>,
    pub attn: Option<Vec<Tensor<f32>>>,
}

impl InComModel {
    pub fn build<S: Scalar>(
        params: &mut Params<S>,
        cfg: &PolicyConfig,
        variant: Variant,
        topology: &str,
        seed: u64,
    ) -> Result<Self, PolicyError> {
        let mut rng = seeded(seed, stream::INIT);
        let img = ImageEncoder::new(params, &mut rng, "enc2d", cfg);
        let pts = PointEncoder::new(params, &mut rng, "enc3d", cfg);
        let fusion = match variant {
            Variant::WoDarm => Fusion::Plain {
                xattn: (0..LEVELS)
                    .map(|k| {
                        MultiHeadAttention::new(
                            params,
                            &mut rng,
                            &format!("darm.x{k}"),
                            cfg.d_model,
                            cfg.heads,
                        )
                    })
                    .collect(),
            },
            _ => Fusion::Darm {
                levels: (0..LEVELS)
                    .map(|k| {
                        FuseLevel::new(params, &format!("darm.f{k}"), cfg.f_refine_relu)
                    })
                    .collect(),
            },
        };
        let mk_pools = |params: &mut Params<S>, rng: &mut _| {
            [0, 1, 2].map(|k| {
                AttnPool::new(
                    params,
                    rng,
                    &format!("agg{k}"),
                    cfg.d_model,
                    cfg.heads,
                    cfg.agg_tokens,
                )
            })
        };
        let gating = match variant {
            Variant::WoWeights => Gating::Uniform { pools: mk_pools(params, &mut rng) },
            Variant::WoIdppm => Gating::SingleScale {
                pool: AttnPool::new(
                    params,
                    &mut rng,
                    "agg0",
                    cfg.d_model,
                    cfg.heads,
                    LEVELS * cfg.agg_tokens,
                ),
            },
            _ => Gating::Learned {
                idppm: Idppm::new(params, &mut rng, "idppm", cfg),
                pools: mk_pools(params, &mut rng),
            },
        };
        let cond = ConditionBuilder::new(params, &mut rng, "cond", cfg);
        let topo_name = match variant {
            Variant::WoDcfmShared => "shared",
            Variant::WoDcfmSequential => "sequential",
            _ => topology,
        };
        let topo = build_topology(topo_name, params, &mut rng, cfg)?;
        Ok(Self { cfg: cfg.clone(), variant, img, pts, fusion, gating, cond, topo })
    }

    pub fn topology_name(&self) -> &'static str {
        self.topo.name()
    }

    pub fn image_encoder(&self) -> &ImageEncoder {
        &self.img
    }

    /// Shared perception path: encoders, fusion, gated aggregation, condition
    /// tokens. `align` selects how (whether) the level-averaged OT alignment
    /// loss is computed; it only applies to the DARM fusion.
    pub fn perceive<S: Scalar>(
        &self,
        s: &mut Session<S>,
        images: &[&[f32]],
        points: &[&[f32]],
        proprio: &[&[f32]],
        history: &[&[f32]],
        valid: &[usize],
        align: AlignSpec,
    ) -> Result<Perception, PolicyError> {
        let d = self.cfg.d_model;
        let ip = self.img.forward(s, images);
        let pp = self.pts.forward(s, points);

        let mut fused = [NodeId(0); LEVELS];
        let mut align_nodes = Vec::new();
        let mut align_stats: Option<AlignStats> = None;
        let mut log_plans: Option<Vec<Tensor<f64>>> = None;
        match &self.fusion {
            Fusion::Darm { levels } => {
                for k in 0..LEVELS {
                    let a_geo = affinity(s, pp.p3d[k], ip.p2d[k], d);
                    let a_sem = affinity(s, pp.f3d[k], ip.f2d[k], d);
                    let logits = levels[k].logits(s, a_geo, a_sem);
                    let (att, _) = levels[k].attend(s, logits, ip.f2d[k]);
                    fused[k] = s.tape.add(pp.f3d[k], att);
                    match &align {
                        AlignSpec::Off => {}
                        AlignSpec::Live => {
                            let geo = {
                                let v = s.tape.value(a_geo);
                                Tensor::new(
                                    v.shape().to_vec(),
                                    v.data().iter().map(|&x| x.to_f64()).collect(),
                                )
                            };
                            let (plan, st) = transport_log_plan(
                                &geo,
                                self.cfg.sinkhorn_eps,
                                self.cfg.sinkhorn_iters,
                                self.cfg.sinkhorn_tol,
                            )?;
                            align_nodes.push(align_kl(s, a_sem, &plan));
                            log_plans.get_or_insert_with(Vec::new).push(plan);
                            let acc = align_stats.get_or_insert(AlignStats {
                                iterations: 0,
                                marginal_error: 0.0,
                            });
                            acc.iterations = acc.iterations.max(st.iterations);
                            acc.marginal_error = acc.marginal_error.max(st.marginal_error);
                        }
                        AlignSpec::Frozen(plans) => {
                            align_nodes.push(align_kl(s, a_sem, &plans[k]));
                        }
                    }
                }
            }
            Fusion::Plain { xattn } => {
                for k in 0..LEVELS {
                    let q = s.tape.add(pp.f3d[k], pp.p3d[k]);
                    let kv = s.tape.add_tokens(ip.f2d[k], ip.p2d[k]);
                    let out = xattn[k].forward(s, q, kv, None);
                    fused[k] = s.tape.add(pp.f3d[k], out.out);
                }
            }
        }
        let l_align = if align_nodes.is_empty() {
            None
        } else {
            let sum = align_nodes
                .iter()
                .skip(1)
                .fold(align_nodes[0], |acc, &n| s.tape.add(acc, n));
            Some(s.tape.scale(sum, S::from_f64(1.0 / align_nodes.len() as f64)))
        };

        let (agg, w) = match &self.gating {
            Gating::Learned { idppm, pools } => {
                let h_t = idppm.hist.forward(s, history, valid, ip.v_global);
                let (w, _) = idppm.gater.forward(s, h_t);
                (aggregate_pyramid(s, &fused, Some(w), pools), Some(w))
            }
            Gating::Uniform { pools } => (aggregate_pyramid(s, &fused, None, pools), None),
            Gating::SingleScale { pool } => (pool.forward(s, fused[0]).out, None),
        };
        let c = self.cond.forward(s, agg, proprio, history);
        Ok(Perception { c, w, l_align, align_stats, log_plans, attn: ip.attn })
    }

    /// One training forward pass producing the three loss heads.
    pub fn forward_train<S: SessionScalar>(
        &self,
        s: &mut Session<S>,
        batch: &[Sample],
        rng: &mut impl Rng,
        reduction: Reduction,
        align: AlignSpec,
    ) -> Result<TrainOutput, PolicyError> {
        assert!(!batch.is_empty());
        let cfg = &self.cfg;
        let b = batch.len();
        let images: Vec<&[f32]> = batch.iter().map(|x| x.obs.images.as_slice()).collect();
        let points: Vec<&[f32]> = batch.iter().map(|x| x.obs.points.as_slice()).collect();
        let proprio: Vec<&[f32]> = batch.iter().map(|x| x.obs.proprio.as_slice()).collect();
        let history: Vec<&[f32]> = batch.iter().map(|x| x.obs.history.as_slice()).collect();
        let valid: Vec<usize> = batch.iter().map(|x| x.obs.valid_hist).collect();

        let per = self.perceive(s, &images, &points, &proprio, &history, &valid, align)?;

        let zero = |s: &mut Session<S>| s.tape.constant(Tensor::scalar(S::zero()));
        let l_scale = match (&self.gating, per.w) {
            (Gating::Learned { .. }, Some(w)) => {
                let mut targets = Vec::with_capacity(b * 3);
                for sample in batch {
                    let st = activity_stats(
                        &sample.obs.history,
                        sample.obs.valid_hist,
                        cfg.h_hist,
                        cfg.d_base,
                        cfg.d_arm,
                        cfg.alpha,
                        cfg.activity_source,
                    );
                    let t = target_weights(st.i_base, st.i_arm, cfg.target_eps);
                    targets.extend(t.iter().map(|&v| S::from_f64(v)));
                }
                let targets = Tensor::new(vec![b, 3], targets);
                scale_loss(s, w, &targets, cfg.lambda_ent)
            }
            _ => zero(s),
        };

        let (tp, d_act) = (cfg.t_p, cfg.action_dim());
        let mut ts = Vec::with_capacity(b);
        let mut at_all = Vec::with_capacity(b);
        let mut u_all = Vec::with_capacity(b);
        for sample in batch {
            assert_eq!(sample.chunk.len(), tp * d_act, "chunk size mismatch");
            let a1: Tensor<S> = Tensor::new(
                vec![tp, d_act],
                sample.chunk.iter().map(|&v| S::from_f64(v as f64)).collect(),
            );
            let a0 = Tensor::from_f64_slice(
                vec![tp, d_act],
                &incom_core::rng::normal_vec(rng, tp * d_act, 0.0, 1.0),
            );
            let t = rng.random_range(0.0..1.0);
            ts.push(t);
            at_all.push(flow_interpolate(&a0, &a1, t)?);
            u_all.push(velocity_target(&a0, &a1));
        }
        let split = |parts: &[Tensor<S>], lo: usize, hi: usize| -> Tensor<S> {
            let mut data = Vec::with_capacity(b * tp * (hi - lo));
            for p in parts {
                for row in 0..tp {
                    data.extend_from_slice(&p.data()[row * d_act + lo..row * d_act + hi]);
                }
            }
            Tensor::new(vec![b, tp, hi - lo], data)
        };
        let a_base = s.tape.constant(split(&at_all, 0, cfg.d_base));
        let a_arm = s.tape.constant(split(&at_all, cfg.d_base, d_act));
        let u_base = s.tape.constant(split(&u_all, 0, cfg.d_base));
        let u_arm = s.tape.constant(split(&u_all, cfg.d_base, d_act));
        let t_feats = s.tape.constant(feat::time_features(&ts, cfg.n_freq));

        let out: BranchOut =
            predict(self.topo.as_ref(), s, &FlowInput { a_base, a_arm, t_feats, c: per.c });
        let l_flow = flow_loss(s, &out, u_base, u_arm, reduction);
        let l_align = match per.l_align {
            Some(n) => n,
            None => zero(s),
        };
        Ok(TrainOutput {
            l_flow,
            l_scale,
            l_align,
            w: per.w,
            sinkhorn_iterations: per.align_stats.as_ref().map_or(0, |s| s.iterations),
            sinkhorn_marginal_error: per
                .align_stats
                .as_ref()
                .map_or(0.0, |s| s.marginal_error),
            log_plans: per.log_plans,
        })
    }

    /// Sample one normalized action chunk for an observation. `capture_attn`
    /// additionally returns the per-level image attention maps.
    pub fn forward_eval(
        &self,
        params: &Params<f32>,
        obs: &ObsInput,
        rng: &mut impl Rng,
        capture_attn: bool,
    ) -> Result<EvalOutput, PolicyError> {
        let mut s = Session::new(params);
        let per = self.perceive(
            &mut s,
            &[obs.images.as_slice()],
            &[obs.points.as_slice()],
            &[obs.proprio.as_slice()],
            &[obs.history.as_slice()],
            &[obs.valid_hist],
            AlignSpec::Off,
        )?;
        let w = match (&self.gating, per.w) {
            (Gating::Uniform { .. }, _) => Some([1.0 / 3.0; 3]),
            (_, Some(node)) => {
                let v = s.tape.value(node).data();
                Some([v[0], v[1], v[2]])
            }
            _ => None,
        };
        let cfg = &self.cfg;
        let (base, arm) = sample_actions(
            &mut s,
            self.topo.as_ref(),
            per.c,
            cfg.t_p,
            cfg.d_base,
            cfg.d_arm,
            cfg.flow_steps,
            cfg.n_freq,
            rng,
        )?;
        let mut chunk = Vec::with_capacity(cfg.t_p);
        for row in 0..cfg.t_p {
            let mut act = Vec::with_capacity(cfg.action_dim());
            act.extend_from_slice(&base.data()[row * cfg.d_base..(row + 1) * cfg.d_base]);
            act.extend_from_slice(&arm.data()[row * cfg.d_arm..(row + 1) * cfg.d_arm]);
            chunk.push(act);
        }
        let attn = capture_attn
            .then(|| per.attn.iter().map(|&n| s.tape.value(n).clone()).collect());
        Ok(EvalOutput { chunk, w, attn })
    }
}
