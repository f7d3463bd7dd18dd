//! Adam with bias correction. Moment buffers are addressed by parameter id,
//! sized at construction, and serialized alongside weights in checkpoints.

use crate::nn::{ParamId, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct Adam<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &Params<S>) -> Self {
        let m = (0..params.len())
            .map(|i| Tensor::zeros(params.value(ParamId(i)).shape().to_vec()))
            .collect();
        let v = (0..params.len())
            .map(|i| Tensor::zeros(params.value(ParamId(i)).shape().to_vec()))
            .collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update. Parameters without a gradient this step are left
    /// untouched (their moments do not decay).
    pub fn step(&mut self, params: &mut Params<S>, grads: &[(ParamId, Tensor<S>)], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (S::from_f64(self.beta1), S::from_f64(self.beta2));
        let (ob1, ob2) = (S::from_f64(1.0 - self.beta1), S::from_f64(1.0 - self.beta2));
        for (pid, g) in grads {
            let m = &mut self.m[pid.0];
            let v = &mut self.v[pid.0];
            let w = params.value_mut(*pid);
            assert_eq!(w.len(), g.len(), "grad shape mismatch for param {}", pid.0);
            for i in 0..w.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + ob1 * gi;
                let vi = b2 * v.data()[i] + ob2 * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi.to_f64() / bc1;
                let vhat = vi.to_f64() / bc2;
                let upd = lr * mhat / (vhat.sqrt() + self.eps);
                w.data_mut()[i] = S::from_f64(w.data()[i].to_f64() - upd);
            }
        }
    }

    pub fn moment_m(&self, pid: ParamId) -> &Tensor<S> {
        &self.m[pid.0]
    }

    pub fn moment_v(&self, pid: ParamId) -> &Tensor<S> {
        &self.v[pid.0]
    }

    pub fn restore(&mut self, pid: ParamId, m: Tensor<S>, v: Tensor<S>, t: u64) {
        assert_eq!(self.m[pid.0].shape(), m.shape());
        assert_eq!(self.v[pid.0].shape(), v.shape());
        self.m[pid.0] = m;
        self.v[pid.0] = v;
        self.t = t;
    }
}
