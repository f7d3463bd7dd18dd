//! Intent-driven pyramid gating: a small causal transformer reads the recent
//! action history (with the scene summary as its context token) and emits
//! softmax weights over the three pyramid levels. Supervision comes from
//! base/arm activity statistics of the same history.

use incom_core::nn::{AttnPool, EncoderBlock, Linear, ParamId, Params, Session};
use incom_core::tensor::Tensor;
use incom_core::{NodeId, Scalar};
use rand::Rng;

use crate::config::{ActivitySource, PolicyConfig};
use crate::feat;

/// Transformer over [ctx, a_{t-H} .. a_{t-1}]; the context row of the final
/// block is the intent feature h_t.
pub struct HistoryEncoder {
    embed: Linear,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
    heads: usize,
    h_hist: usize,
    d_act: usize,
    d_model: usize,
}

impl HistoryEncoder {
    pub fn new<S: Scalar>(
        params: &mut Params<S>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &PolicyConfig,
    ) -> Self {
        let d_act = cfg.action_dim();
        let t = 1 + cfg.h_hist;
        let pos = params.get_or_init(&format!("{name}.pos"), &[t, cfg.d_model], || {
            let lim = (1.0 / cfg.d_model as f64).sqrt();
            let data =
                (0..t * cfg.d_model).map(|_| S::from_f64(rng.random_range(-lim..lim))).collect();
            Tensor::new(vec![t, cfg.d_model], data)
        });
        let blocks = (0..cfg.hist_blocks)
            .map(|i| {
                EncoderBlock::new(params, rng, &format!("{name}.b{i}"), cfg.d_model, cfg.heads)
            })
            .collect();
        Self {
            embed: Linear::new(params, rng, &format!("{name}.embed"), d_act, cfg.d_model, true),
            pos,
            blocks,
            heads: cfg.heads,
            h_hist: cfg.h_hist,
            d_act,
            d_model: cfg.d_model,
        }
    }

    /// `history[b]` holds H rows of d_act floats, oldest first, with the last
    /// `valid[b]` rows real (earlier rows are padding and fully masked).
    /// `v_global` is (B, 1, D). Returns h_t as (B, 1, D).
    pub fn forward<S: Scalar>(
        &self,
        s: &mut Session<S>,
        history: &[&[f32]],
        valid: &[usize],
        v_global: NodeId,
    ) -> NodeId {
        let b = history.len();
        assert_eq!(valid.len(), b);
        let (h, d_act) = (self.h_hist, self.d_act);
        let mut data = Vec::with_capacity(b * h * d_act);
        for row in history {
            assert_eq!(row.len(), h * d_act, "history buffer size mismatch");
            data.extend(row.iter().map(|&v| S::from_f64(v as f64)));
        }
        let hist = s.tape.constant(Tensor::new(vec![b, h, d_act], data));
        let tokens = self.embed.forward(s, hist);
        let mut x = s.tape.concat(&[v_global, tokens], 1);
        let pos = s.p(self.pos);
        x = s.tape.add_tokens(x, pos);
        let mask: Tensor<S> = feat::history_mask(valid, self.heads, h);
        for blk in &self.blocks {
            let (y, _) = blk.forward(s, x, Some(mask.clone()));
            x = y;
        }
        s.tape.slice(x, 1, 0, 1)
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }
}

/// Two-layer MLP from h_t to scale logits; weights are its softmax.
pub struct ScaleGater {
    l1: Linear,
    l2: Linear,
}

impl ScaleGater {
    pub fn new<S: Scalar>(
        params: &mut Params<S>,
        rng: &mut impl Rng,
        name: &str,
        d_model: usize,
    ) -> Self {
        Self {
            l1: Linear::new(params, rng, &format!("{name}.1"), d_model, d_model, true),
            l2: Linear::new(params, rng, &format!("{name}.2"), d_model, 3, true),
        }
    }

    /// h_t (B, 1, D) -> (weights (B, 3), logits (B, 3))
    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, h_t: NodeId) -> (NodeId, NodeId) {
        let b = s.tape.value(h_t).shape()[0];
        let d = s.tape.value(h_t).shape()[2];
        let x = s.tape.reshape(h_t, vec![b, d]);
        let x = self.l1.forward(s, x);
        let x = s.tape.relu(x);
        let logits = self.l2.forward(s, x);
        (s.tape.softmax_last(logits, None), logits)
    }
}

pub struct Idppm {
    pub hist: HistoryEncoder,
    pub gater: ScaleGater,
}

impl Idppm {
    pub fn new<S: Scalar>(
        params: &mut Params<S>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &PolicyConfig,
    ) -> Self {
        Self {
            hist: HistoryEncoder::new(params, rng, &format!("{name}.hist"), cfg),
            gater: ScaleGater::new(params, rng, &format!("{name}.gate"), cfg.d_model),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivityStats {
    pub i_base: f64,
    pub i_arm: f64,
    /// number of displacement terms actually averaged (effective T_h)
    pub steps: usize,
}

/// Mean per-step displacement magnitude of the base and arm channels over the
/// valid window (Eq. of the activity targets). The final arm channel is the
/// gripper latch command, not motion, so arm activity covers the joint
/// channels only.
pub fn activity_stats(
    history: &[f32],
    valid: usize,
    h: usize,
    d_base: usize,
    d_arm: usize,
    alpha: f64,
    source: ActivitySource,
) -> ActivityStats {
    let d_act = d_base + d_arm;
    assert_eq!(history.len(), h * d_act, "history buffer size mismatch");
    assert!(valid <= h);
    let first = h - valid;
    let row = |i: usize| &history[i * d_act..(i + 1) * d_act];
    let mut deltas: Vec<Vec<f64>> = Vec::new();
    match source {
        ActivitySource::Actions => {
            for i in first..h {
                deltas.push(row(i).iter().map(|&v| v as f64).collect());
            }
        }
        ActivitySource::Differences => {
            for i in (first + 1)..h {
                let (a, b) = (row(i - 1), row(i));
                deltas.push(a.iter().zip(b).map(|(&x, &y)| y as f64 - x as f64).collect());
            }
        }
    }
    let steps = deltas.len();
    if steps == 0 {
        return ActivityStats { i_base: 0.0, i_arm: 0.0, steps: 0 };
    }
    let norm = |d: &[f64], lo: usize, hi: usize| -> f64 {
        d[lo..hi].iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    let mut i_base = 0.0;
    let mut i_arm = 0.0;
    for d in &deltas {
        i_base += norm(d, 0, d_base);
        i_arm += norm(d, d_base, d_base + d_arm - 1);
    }
    ActivityStats {
        i_base: i_base / steps as f64,
        i_arm: alpha * i_arm / steps as f64,
        steps,
    }
}

/// Target weights over (S, M, D): u = (I_arm+e, sqrt((I_arm+e)(I_base+e)),
/// I_base+e), normalized.
pub fn target_weights(i_base: f64, i_arm: f64, eps: f64) -> [f64; 3] {
    assert!(eps > 0.0, "target eps must be positive");
    let a = i_arm + eps;
    let b = i_base + eps;
    let u = [a, (a * b).sqrt(), b];
    let z: f64 = u.iter().sum();
    [u[0] / z, u[1] / z, u[2] / z]
}

/// L_scale = KL(w || w*) + lambda_ent * sum(w log w), batch-averaged; w* is a
/// constant (detached target).
pub fn scale_loss<S: Scalar>(
    s: &mut Session<S>,
    w: NodeId,
    w_star: &Tensor<S>,
    lambda_ent: f64,
) -> NodeId {
    let shape = s.tape.value(w).shape().to_vec();
    assert_eq!(w_star.shape(), &shape[..], "target shape mismatch");
    let b = shape[0];
    let log_star = w_star.map(|v| S::from_f64(v.to_f64().max(1e-9).ln()));
    let log_star = s.tape.constant(log_star);
    let lw = s.tape.log_floor(w, S::from_f64(1e-9));
    let diff = s.tape.sub(lw, log_star);
    let kl_el = s.tape.mul(w, diff);
    let kl = s.tape.sum_all(kl_el);
    let ent_el = s.tape.mul(w, lw);
    let ent = s.tape.sum_all(ent_el);
    let tot = s.tape.add_scaled(kl, ent, S::from_f64(lambda_ent));
    s.tape.scale(tot, S::from_f64(1.0 / b as f64))
}

/// Pool each fused level to `pool.n_queries()` tokens, weight level k by w_k
/// (or uniformly by 1/3 when no gate is present), and concatenate along the
/// token axis.
pub fn aggregate_pyramid<S: Scalar>(
    s: &mut Session<S>,
    fused: &[NodeId; 3],
    w: Option<NodeId>,
    pools: &[AttnPool; 3],
) -> NodeId {
    let mut parts = Vec::with_capacity(3);
    for k in 0..3 {
        let mut tok = pools[k].forward(s, fused[k]).out;
        tok = match w {
            Some(w) => {
                let wk = s.tape.select_last(w, k);
                s.tape.mul_bscalar(tok, wk)
            }
            None => s.tape.scale(tok, S::from_f64(1.0 / 3.0)),
        };
        parts.push(tok);
    }
    s.tape.concat(&parts, 1)
}
