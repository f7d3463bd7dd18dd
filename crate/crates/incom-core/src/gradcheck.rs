//! Central-difference gradient checking against a scalar loss closure.
//! Only meaningful at f64; f32 round-off swamps the 1e-4 tolerances used in
//! the test suites.

use std::collections::BTreeMap;

use crate::nn::{ParamId, Params};
use crate::tensor::Tensor;

pub struct GradcheckReport {
    pub max_rel: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradcheckReport {
    pub fn assert_below(&self, tol: f64) {
        assert!(
            self.max_rel < tol,
            "gradcheck failed: rel {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e}; tol {:.1e}, {} entries)",
            self.max_rel,
            self.worst_param,
            self.worst_index,
            self.analytic,
            self.numeric,
            tol,
            self.checked,
        );
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Perturb every entry of every parameter by ±eps, re-evaluating `eval`, and
/// compare the central difference against `analytic` (keyed by param name;
/// params absent from the map are treated as zero-gradient). `floor` sets
/// the denominator floor of the relative error: central differences carry
/// ~eps_mach*|f|/eps of round-off, so truly-zero gradients read back as
/// ~1e-11 noise — the floor keeps that from registering as infinite error.
pub fn check_params(
    params: &mut Params<f64>,
    analytic: &BTreeMap<String, Tensor<f64>>,
    eps: f64,
    floor: f64,
    eval: &mut dyn FnMut(&mut Params<f64>) -> f64,
) -> GradcheckReport {
    let mut report = GradcheckReport {
        max_rel: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for pi in 0..params.len() {
        let pid = ParamId(pi);
        let name = params.name(pid).to_string();
        let n = params.value(pid).len();
        for i in 0..n {
            let orig = params.value(pid).data()[i];
            params.value_mut(pid).data_mut()[i] = orig + eps;
            let up = eval(params);
            params.value_mut(pid).data_mut()[i] = orig - eps;
            let down = eval(params);
            params.value_mut(pid).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(&name).map_or(0.0, |t| t.data()[i]);
            let rel = rel_err(a, numeric, floor);
            report.checked += 1;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}
