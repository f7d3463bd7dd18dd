//! Dual-stream alignment: geometric/semantic affinities between the point and
//! image token sets, a learned 2->1 mix that fuses them into cross-modal
//! attention, and an entropic optimal-transport target (Sinkhorn) that
//! regularizes the semantic affinity toward the geometric one.
//!
//! The transport plan is always consumed under stop-gradient, so `sinkhorn`
//! runs outside the tape entirely, in f64, and its result enters the graph as
//! a constant.

use incom_core::nn::{ParamId, Params, Session};
use incom_core::tensor::Tensor;
use incom_core::{NodeId, Scalar};

use crate::PolicyError;

/// Scaled dot-product affinity between token sets: (B, N, D) x (M, D) or
/// (B, M, D) -> (B, N, M), scaled by 1/sqrt(D).
pub fn affinity<S: Scalar>(s: &mut Session<S>, q: NodeId, k: NodeId, d_model: usize) -> NodeId {
    let a = s.tape.matmul_nt(q, k);
    s.tape.scale(a, S::from_f64(1.0 / (d_model as f64).sqrt()))
}

/// Learned per-level fusion of the two affinity maps: a 1x1 "conv" over the
/// stacked (geo, sem) channels, i.e. fused = w_g * A_geo + w_s * A_sem + b.
pub struct FuseLevel {
    w_geo: ParamId,
    w_sem: ParamId,
    bias: ParamId,
    relu: bool,
}

impl FuseLevel {
    pub fn new<S: Scalar>(params: &mut Params<S>, name: &str, relu: bool) -> Self {
        let w_geo = params.get_or_init(&format!("{name}.g"), &[1], || {
            Tensor::scalar(S::from_f64(0.5))
        });
        let w_sem = params.get_or_init(&format!("{name}.s"), &[1], || {
            Tensor::scalar(S::from_f64(0.5))
        });
        let bias =
            params.get_or_init(&format!("{name}.b"), &[1], || Tensor::scalar(S::zero()));
        Self { w_geo, w_sem, bias, relu }
    }

    pub fn logits<S: Scalar>(&self, s: &mut Session<S>, a_geo: NodeId, a_sem: NodeId) -> NodeId {
        let wg = s.p(self.w_geo);
        let ws = s.p(self.w_sem);
        let b = s.p(self.bias);
        let g = s.tape.mul_scalar_node(a_geo, wg);
        let m = s.tape.mul_scalar_node(a_sem, ws);
        let x = s.tape.add(g, m);
        let x = s.tape.add_scalar_node(x, b);
        if self.relu {
            s.tape.relu(x)
        } else {
            x
        }
    }

    /// Softmax the fused logits over the image axis and gather image features:
    /// (B, N, M) x (B, M, D) -> (B, N, D). Returns (attended, probs).
    pub fn attend<S: Scalar>(
        &self,
        s: &mut Session<S>,
        logits: NodeId,
        f2d: NodeId,
    ) -> (NodeId, NodeId) {
        let p = s.tape.softmax_last(logits, None);
        (s.tape.matmul(p, f2d), p)
    }
}

/// OT cost from the geometric affinity: C = 1 - row-softmax(A_geo).
pub fn transport_cost(a_geo: &Tensor<f64>) -> Tensor<f64> {
    assert_eq!(a_geo.ndim(), 2, "transport_cost expects one (N, M) matrix");
    let (n, m) = (a_geo.shape()[0], a_geo.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &a_geo.data()[i * m..(i + 1) * m];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in row {
            z += (v - mx).exp();
        }
        for j in 0..m {
            out[i * m + j] = 1.0 - (row[j] - mx).exp() / z;
        }
    }
    Tensor::new(vec![n, m], out)
}

pub struct TransportPlan {
    /// (N, M), rows sum to 1/N, columns to 1/M at convergence
    pub plan: Tensor<f64>,
    pub iterations: usize,
    /// max row-sum deviation + max column-sum deviation of the returned plan
    pub marginal_error: f64,
}

/// Entropic OT with uniform marginals (1/N, 1/M) via Sinkhorn iterations.
/// Duals are kept in log space; when the scaled costs are moderate the kernel
/// exp(-C/eps) is factored out once so each iteration is a matvec, otherwise
/// a direct logsumexp per row/column is used. Both paths compute the same
/// update.
pub fn sinkhorn(
    cost: &Tensor<f64>,
    eps: f64,
    max_iters: usize,
    tol: f64,
) -> Result<TransportPlan, PolicyError> {
    if cost.ndim() != 2 {
        return Err(PolicyError::Sinkhorn(format!(
            "cost must be a matrix, got rank {}",
            cost.ndim()
        )));
    }
    let (n, m) = (cost.shape()[0], cost.shape()[1]);
    if n == 0 || m == 0 {
        return Err(PolicyError::Sinkhorn("empty cost matrix".into()));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(PolicyError::Sinkhorn(format!("eps must be positive, got {eps}")));
    }
    if max_iters == 0 {
        return Err(PolicyError::Sinkhorn("max_iters must be >= 1".into()));
    }
    if cost.data().iter().any(|v| !v.is_finite()) {
        return Err(PolicyError::Sinkhorn("non-finite cost entry".into()));
    }

    let la = -(n as f64).ln();
    let lb = -(m as f64).ln();
    let lk: Vec<f64> = cost.data().iter().map(|&c| -c / eps).collect();
    // exp(lk) underflows/overflows only for extreme cost/eps ratios; past this
    // bound fall back to entrywise logsumexp
    let factored = lk.iter().all(|v| v.abs() < 280.0);
    let kernel: Vec<f64> = if factored { lk.iter().map(|v| v.exp()).collect() } else { Vec::new() };

    let mut lu = vec![0.0f64; n];
    let mut lv = vec![0.0f64; m];
    let mut row_lse = vec![0.0f64; n]; // logsumexp_j(lk_ij + lv_j)
    let mut iterations = 0;

    for it in 0..max_iters {
        if factored {
            let ev: Vec<f64> = lv.iter().map(|v| v.exp()).collect();
            for i in 0..n {
                let mut acc = 0.0;
                let row = &kernel[i * m..(i + 1) * m];
                for j in 0..m {
                    acc += row[j] * ev[j];
                }
                row_lse[i] = acc.ln();
            }
        } else {
            for i in 0..n {
                let row = &lk[i * m..(i + 1) * m];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..m {
                    mx = mx.max(row[j] + lv[j]);
                }
                let mut acc = 0.0;
                for j in 0..m {
                    acc += (row[j] + lv[j] - mx).exp();
                }
                row_lse[i] = mx + acc.ln();
            }
        }
        // after the previous column update the column sums are exact, so the
        // row-sum deviation alone measures convergence of the current plan
        if it > 0 {
            let err = (0..n)
                .map(|i| ((lu[i] + row_lse[i]).exp() - 1.0 / n as f64).abs())
                .fold(0.0, f64::max);
            if err < tol {
                break;
            }
        }
        for i in 0..n {
            lu[i] = la - row_lse[i];
        }
        if factored {
            let eu: Vec<f64> = lu.iter().map(|v| v.exp()).collect();
            for j in 0..m {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += kernel[i * m + j] * eu[i];
                }
                lv[j] = lb - acc.ln();
            }
        } else {
            for j in 0..m {
                let mut mx = f64::NEG_INFINITY;
                for i in 0..n {
                    mx = mx.max(lk[i * m + j] + lu[i]);
                }
                let mut acc = 0.0;
                for i in 0..n {
                    acc += (lk[i * m + j] + lu[i] - mx).exp();
                }
                lv[j] = lb - (mx + acc.ln());
            }
        }
        iterations = it + 1;
    }

    let mut plan = vec![0.0f64; n * m];
    for i in 0..n {
        for j in 0..m {
            plan[i * m + j] = (lk[i * m + j] + lu[i] + lv[j]).exp();
        }
    }
    let mut row_err = 0.0f64;
    for i in 0..n {
        let s: f64 = plan[i * m..(i + 1) * m].iter().sum();
        row_err = row_err.max((s - 1.0 / n as f64).abs());
    }
    let mut col_err = 0.0f64;
    for j in 0..m {
        let s: f64 = (0..n).map(|i| plan[i * m + j]).sum();
        col_err = col_err.max((s - 1.0 / m as f64).abs());
    }
    Ok(TransportPlan {
        plan: Tensor::new(vec![n, m], plan),
        iterations,
        marginal_error: row_err + col_err,
    })
}

pub struct AlignStats {
    pub iterations: usize,
    pub marginal_error: f64,
}

/// Batched log transport plans for the costs induced by A_geo values:
/// (B, N, M) (or (N, M)) -> elementwise ln(max(T*, 1e-9)) of the same shape.
pub fn transport_log_plan(
    a_geo: &Tensor<f64>,
    eps: f64,
    max_iters: usize,
    tol: f64,
) -> Result<(Tensor<f64>, AlignStats), PolicyError> {
    let (b, n, m) = a_geo.as_bmk();
    let mut log_t = Vec::with_capacity(b * n * m);
    let mut stats = AlignStats { iterations: 0, marginal_error: 0.0 };
    for bi in 0..b {
        let sample = a_geo.data()[bi * n * m..(bi + 1) * n * m].to_vec();
        let cost = transport_cost(&Tensor::new(vec![n, m], sample));
        let tp = sinkhorn(&cost, eps, max_iters, tol)?;
        stats.iterations = stats.iterations.max(tp.iterations);
        stats.marginal_error = stats.marginal_error.max(tp.marginal_error);
        log_t.extend(tp.plan.data().iter().map(|&p| p.max(1e-9).ln()));
    }
    Ok((Tensor::new(a_geo.shape().to_vec(), log_t), stats))
}

/// KL(P_sem || T*) where the log plan enters as a constant. P_sem is the
/// row-softmax of A_sem scaled to total mass 1; batch-averaged.
pub fn align_kl<S: Scalar>(s: &mut Session<S>, a_sem: NodeId, log_t: &Tensor<f64>) -> NodeId {
    let sem_shape = s.tape.value(a_sem).shape().to_vec();
    assert_eq!(log_t.shape(), &sem_shape[..], "plan/affinity shape mismatch");
    let (b, n, _) = s.tape.value(a_sem).as_bmk();
    let log_t = s.tape.constant(Tensor::from_f64_slice(sem_shape, log_t.data()));
    let p = s.tape.softmax_last(a_sem, None);
    let p = s.tape.scale(p, S::from_f64(1.0 / n as f64));
    let lp = s.tape.log_floor(p, S::from_f64(1e-9));
    let diff = s.tape.sub(lp, log_t);
    let el = s.tape.mul(p, diff);
    let sum = s.tape.sum_all(el);
    s.tape.scale(sum, S::from_f64(1.0 / b as f64))
}

/// KL(P_sem || sg(T*)) for one pyramid level, batch-averaged. T* is the
/// Sinkhorn plan for the cost induced by A_geo. The plan is computed from
/// A_geo's *values*, so no gradient flows into the geometric stream from this
/// loss.
pub fn align_loss<S: Scalar>(
    s: &mut Session<S>,
    a_sem: NodeId,
    a_geo: NodeId,
    eps: f64,
    max_iters: usize,
    tol: f64,
) -> Result<(NodeId, AlignStats), PolicyError> {
    let geo = {
        let v = s.tape.value(a_geo);
        assert_eq!(
            v.shape(),
            s.tape.value(a_sem).shape(),
            "affinity shapes must match"
        );
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x.to_f64()).collect())
    };
    let (log_t, stats) = transport_log_plan(&geo, eps, max_iters, tol)?;
    Ok((align_kl(s, a_sem, &log_t), stats))
}
