//! Activity statistics, target weights, scale loss, and the history-intent
//! path: closed forms plus masking and aggregation contracts.

use std::collections::BTreeMap;

use incom_core::gradcheck::check_params;
use incom_core::nn::{AttnPool, Params, Session};
use incom_core::rng::{seeded, stream, uniform_vec};
use incom_core::tensor::Tensor;
use incom_policy::idppm::{
    activity_stats, aggregate_pyramid, scale_loss, target_weights, HistoryEncoder, Idppm,
    ScaleGater,
};
use incom_policy::{ActivitySource, PolicyConfig};

fn micro_cfg() -> PolicyConfig {
    PolicyConfig {
        d_model: 8,
        heads: 2,
        h_hist: 4,
        hist_blocks: 2,
        ..PolicyConfig::desk()
    }
}

#[test]
fn activity_matches_hand_computed_example() {
    // base increments (1,0) then (0,1): unit norms, mean 1
    let history = vec![1.0f32, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    let st = activity_stats(&history, 2, 2, 2, 3, 1.0, ActivitySource::Actions);
    assert!((st.i_base - 1.0).abs() < 1e-12);
    assert_eq!(st.i_arm, 0.0);
    assert_eq!(st.steps, 2);
}

#[test]
fn alpha_scales_arm_activity_only() {
    // arm joints (0.3, 0.4) per step: norm 0.5; gripper channel excluded
    let row = [0.0f32, 0.0, 0.3, 0.4, 0.9];
    let history: Vec<f32> = row.iter().chain(row.iter()).copied().collect();
    let a1 = activity_stats(&history, 2, 2, 2, 3, 1.0, ActivitySource::Actions);
    let a2 = activity_stats(&history, 2, 2, 2, 3, 2.0, ActivitySource::Actions);
    assert!((a1.i_arm - 0.5).abs() < 1e-7);
    assert!((a2.i_arm - 1.0).abs() < 1e-7);
    assert_eq!(a1.i_base, a2.i_base);
}

#[test]
fn gripper_channel_does_not_count_as_motion() {
    let history = vec![0.0f32, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, -1.0];
    let st = activity_stats(&history, 2, 2, 2, 3, 1.0, ActivitySource::Actions);
    assert_eq!(st.i_base, 0.0);
    assert_eq!(st.i_arm, 0.0);
    assert_eq!(st.steps, 2);
}

#[test]
fn difference_source_uses_successive_deltas() {
    // stored actions 1, 3, 6 in the first base channel -> deltas 2, 3
    let mut history = vec![0.0f32; 3 * 5];
    history[0] = 1.0;
    history[5] = 3.0;
    history[10] = 6.0;
    let st = activity_stats(&history, 3, 3, 2, 3, 1.0, ActivitySource::Differences);
    assert!((st.i_base - 2.5).abs() < 1e-7);
    assert_eq!(st.steps, 2);

    // a single valid row has no successive pair
    let st = activity_stats(&history, 1, 3, 2, 3, 1.0, ActivitySource::Differences);
    assert_eq!((st.i_base, st.i_arm, st.steps), (0.0, 0.0, 0));
}

#[test]
fn empty_window_reports_zero_activity() {
    let history = vec![0.5f32; 4 * 5];
    let st = activity_stats(&history, 0, 4, 2, 3, 1.0, ActivitySource::Actions);
    assert_eq!((st.i_base, st.i_arm, st.steps), (0.0, 0.0, 0));

    let zeros = vec![0.0f32; 4 * 5];
    let st = activity_stats(&zeros, 4, 4, 2, 3, 1.0, ActivitySource::Actions);
    assert_eq!((st.i_base, st.i_arm), (0.0, 0.0));
    assert_eq!(st.steps, 4);
}

#[test]
fn short_history_uses_effective_window() {
    let mut history = vec![0.0f32; 8 * 5];
    for i in 6..8 {
        history[i * 5] = 2.0;
    }
    let st = activity_stats(&history, 2, 8, 2, 3, 1.0, ActivitySource::Actions);
    assert_eq!(st.steps, 2);
    assert!((st.i_base - 2.0).abs() < 1e-7);
}

#[test]
fn target_weights_closed_forms() {
    // symmetric activities force the uniform target
    let w = target_weights(0.7, 0.7, 1e-3);
    for &v in &w {
        assert!((v - 1.0 / 3.0).abs() < 1e-9);
    }

    // (I_base, I_arm) = (4, 1) in the eps->0 limit: u = (1, 2, 4)/7
    let w = target_weights(4.0, 1.0, 1e-12);
    assert!((w[0] - 1.0 / 7.0).abs() < 1e-9);
    assert!((w[1] - 2.0 / 7.0).abs() < 1e-9);
    assert!((w[2] - 4.0 / 7.0).abs() < 1e-9);

    // pure navigation pushes nearly all mass to the deep level
    let w = target_weights(100.0, 0.0, 1e-3);
    assert!(w[2] > 0.99, "w_D = {} should dominate", w[2]);
}

#[test]
fn target_weights_simplex_and_monotone() {
    let mut prev_d = -1.0;
    let mut prev_s = 2.0;
    for k in 0..8 {
        let i_base = 0.25 * k as f64;
        let w = target_weights(i_base, 0.8, 1e-3);
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(w.iter().all(|&v| v >= 0.0));
        assert!(w[2] > prev_d, "w_D must increase with I_base");
        assert!(w[0] < prev_s, "w_S must decrease with I_base");
        prev_d = w[2];
        prev_s = w[0];
    }
}

#[test]
#[should_panic(expected = "target eps")]
fn target_weights_rejects_zero_eps() {
    target_weights(1.0, 1.0, 0.0);
}

#[test]
fn scale_loss_closed_forms() {
    let params: Params<f64> = Params::new();
    let mut s = Session::new(&params);
    let third = 1.0f64 / 3.0;

    // w = w* uniform, no entropy term -> exactly zero
    let w = s.tape.constant(Tensor::new(vec![1, 3], vec![third; 3]));
    let target = Tensor::new(vec![1, 3], vec![third; 3]);
    let l = scale_loss(&mut s, w, &target, 0.0);
    assert!(s.tape.value(l).item().abs() < 1e-12);

    // uniform w against a skewed target at lambda_ent = 0.1:
    // KL(u || w*) + 0.1 * (-ln 3)
    let w = s.tape.constant(Tensor::new(vec![1, 3], vec![third; 3]));
    let target = Tensor::new(vec![1, 3], vec![0.5, 0.25, 0.25]);
    let l = scale_loss(&mut s, w, &target, 0.1);
    let kl = third * (third / 0.5f64).ln() + 2.0 * third * (third / 0.25f64).ln();
    let expect = kl + 0.1 * -(3.0f64.ln());
    assert!((s.tape.value(l).item() - expect).abs() < 1e-12);

    // batch of two identical rows averages to the same value
    let w = s.tape.constant(Tensor::new(vec![2, 3], vec![third; 6]));
    let target = Tensor::new(vec![2, 3], vec![0.5, 0.25, 0.25, 0.5, 0.25, 0.25]);
    let l2 = scale_loss(&mut s, w, &target, 0.1);
    assert!((s.tape.value(l2).item() - expect).abs() < 1e-12);
}

#[test]
fn scale_loss_lower_bound_over_random_simplexes() {
    let params: Params<f64> = Params::new();
    let mut s = Session::new(&params);
    let mut rng = seeded(21, stream::TASK);
    let bound = 0.1 * -(3.0f64.ln()) - 1e-6;
    for _ in 0..10 {
        let raw = uniform_vec(&mut rng, 6, 0.05, 1.0);
        let norm = |v: &[f64]| -> Vec<f64> {
            let z: f64 = v.iter().sum();
            v.iter().map(|x| x / z).collect()
        };
        let w = s.tape.constant(Tensor::new(vec![1, 3], norm(&raw[..3])));
        let target = Tensor::new(vec![1, 3], norm(&raw[3..]));
        let l = scale_loss(&mut s, w, &target, 0.1);
        assert!(s.tape.value(l).item() >= bound);
    }
}

#[test]
fn gate_gradients_match_finite_differences() {
    let mut params: Params<f64> = Params::new();
    let mut rng = seeded(22, stream::INIT);
    let gater = ScaleGater::new(&mut params, &mut rng, "gate", 8);
    let h_init = uniform_vec(&mut rng, 8, -1.0, 1.0);
    params.get_or_init("h", &[1, 1, 8], || Tensor::new(vec![1, 1, 8], h_init.clone()));
    let target = Tensor::new(vec![1, 3], vec![0.2, 0.3, 0.5]);

    let run = |params: &Params<f64>| -> (f64, BTreeMap<String, Tensor<f64>>) {
        let mut s = Session::new(params);
        let h = s.p(params.id("h").unwrap());
        let (w, _) = gater.forward(&mut s, h);
        let l = scale_loss(&mut s, w, &target, 0.1);
        let v = s.tape.value(l).item();
        let grads = s.tape.backward(l);
        let map = s
            .param_grads(&grads)
            .into_iter()
            .map(|(pid, g)| (params.name(pid).to_string(), g))
            .collect();
        (v, map)
    };
    let analytic = run(&params).1;
    let mut eval = |p: &mut Params<f64>| run(p).0;
    check_params(&mut params, &analytic, 1e-5, 1e-6, &mut eval).assert_below(1e-4);
}

#[test]
fn softmax_closed_form_for_known_logits() {
    let params: Params<f64> = Params::new();
    let mut s = Session::new(&params);
    let logits = s.tape.constant(Tensor::new(vec![1, 3], vec![2.0f64.ln(), 0.0, 0.0]));
    let w = s.tape.softmax_last(logits, None);
    let v = s.tape.value(w).data();
    assert!((v[0] - 0.5).abs() < 1e-12);
    assert!((v[1] - 0.25).abs() < 1e-12);
    assert!((v[2] - 0.25).abs() < 1e-12);
}

#[test]
fn gater_outputs_valid_simplex() {
    let mut params: Params<f64> = Params::new();
    let mut rng = seeded(23, stream::INIT);
    let gater = ScaleGater::new(&mut params, &mut rng, "gate", 8);
    let mut s = Session::new(&params);
    let h = s.tape.constant(Tensor::new(vec![2, 1, 8], uniform_vec(&mut rng, 16, -2.0, 2.0)));
    let (w, logits) = gater.forward(&mut s, h);
    assert_eq!(s.tape.value(w).shape(), &[2, 3]);
    assert_eq!(s.tape.value(logits).shape(), &[2, 3]);
    for b in 0..2 {
        let row = &s.tape.value(w).data()[b * 3..(b + 1) * 3];
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn history_encoder_masks_padded_slots() {
    let cfg = micro_cfg();
    let mut params: Params<f64> = Params::new();
    let mut rng = seeded(24, stream::INIT);
    let enc = HistoryEncoder::new(&mut params, &mut rng, "hist", &cfg);

    let tail = [0.1f32, -0.2, 0.3, 0.0, 0.5, -0.4, 0.2, 0.0, 0.1, 1.0];
    let mut clean = vec![0.0f32; 4 * 5];
    clean[10..].copy_from_slice(&tail);
    let mut garbage = vec![9.0f32; 4 * 5];
    garbage[10..].copy_from_slice(&tail);

    let h_t = |hist: &[f32]| -> Vec<f64> {
        let mut s = Session::new(&params);
        let vg = s.tape.constant(Tensor::new(vec![1, 1, 8], vec![0.3; 8]));
        let out = enc.forward(&mut s, &[hist], &[2], vg);
        assert_eq!(s.tape.value(out).shape(), &[1, 1, 8]);
        s.tape.value(out).data().to_vec()
    };
    assert_eq!(h_t(&clean), h_t(&garbage), "padded slots must not leak into h_t");
}

#[test]
fn history_encoder_sees_the_global_token() {
    let cfg = micro_cfg();
    let mut params: Params<f64> = Params::new();
    let mut rng = seeded(25, stream::INIT);
    let enc = HistoryEncoder::new(&mut params, &mut rng, "hist", &cfg);
    let zeros = vec![0.0f32; 4 * 5];

    let h_t = |vg_fill: f64| -> Vec<f64> {
        let mut s = Session::new(&params);
        let vg = s.tape.constant(Tensor::new(vec![1, 1, 8], vec![vg_fill; 8]));
        let out = enc.forward(&mut s, &[&zeros], &[0], vg);
        s.tape.value(out).data().to_vec()
    };
    let (a, b) = (h_t(0.1), h_t(0.9));
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-6, "h_t must respond to v_global even with empty history");

    // determinism: same inputs, fresh session
    assert_eq!(h_t(0.1), h_t(0.1));
}

#[test]
fn idppm_pipeline_emits_simplex_weights() {
    let cfg = micro_cfg();
    let mut params: Params<f64> = Params::new();
    let mut rng = seeded(26, stream::INIT);
    let idppm = Idppm::new(&mut params, &mut rng, "idppm", &cfg);
    let mut s = Session::new(&params);
    let hist: Vec<f32> = uniform_vec(&mut rng, 2 * 4 * 5, -1.0, 1.0).iter().map(|&v| v as f32).collect();
    let vg = s.tape.constant(Tensor::new(vec![2, 1, 8], uniform_vec(&mut rng, 16, -1.0, 1.0)));
    let h_t = idppm.hist.forward(&mut s, &[&hist[..20], &hist[20..]], &[4, 2], vg);
    let (w, _) = idppm.gater.forward(&mut s, h_t);
    for b in 0..2 {
        let row = &s.tape.value(w).data()[b * 3..(b + 1) * 3];
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}

#[test]
fn aggregation_weights_levels() {
    let mut params: Params<f64> = Params::new();
    let mut rng = seeded(27, stream::INIT);
    let (d, q) = (8usize, 2usize);
    let pools = [
        AttnPool::new(&mut params, &mut rng, "agg0", d, 2, q),
        AttnPool::new(&mut params, &mut rng, "agg1", d, 2, q),
        AttnPool::new(&mut params, &mut rng, "agg2", d, 2, q),
    ];
    let mut s = Session::new(&params);
    let fused = [
        s.tape.constant(Tensor::new(vec![1, 8, d], uniform_vec(&mut rng, 64, -1.0, 1.0))),
        s.tape.constant(Tensor::new(vec![1, 4, d], uniform_vec(&mut rng, 32, -1.0, 1.0))),
        s.tape.constant(Tensor::new(vec![1, 2, d], uniform_vec(&mut rng, 16, -1.0, 1.0))),
    ];

    // one-hot weight keeps only the shallow block
    let w = s.tape.constant(Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]));
    let hot = aggregate_pyramid(&mut s, &fused, Some(w), &pools);
    assert_eq!(s.tape.value(hot).shape(), &[1, 3 * q, d]);
    let hot_vals = s.tape.value(hot).data().to_vec();
    assert!(hot_vals[q * d..].iter().all(|&v| v == 0.0), "unselected levels must zero out");

    // uniform pooling is the same computation scaled by 1/3
    let uni = aggregate_pyramid(&mut s, &fused, None, &pools);
    let uni_vals = s.tape.value(uni).data().to_vec();
    for i in 0..q * d {
        assert!((hot_vals[i] - 3.0 * uni_vals[i]).abs() < 1e-12);
    }

    // an explicitly uniform gate matches the gate-free path exactly
    let w3 = s.tape.constant(Tensor::new(vec![1, 3], vec![1.0 / 3.0; 3]));
    let gated = aggregate_pyramid(&mut s, &fused, Some(w3), &pools);
    assert_eq!(s.tape.value(gated).data(), &uni_vals[..]);
}

#[test]
fn attention_pooling_is_permutation_invariant() {
    let mut params: Params<f64> = Params::new();
    let mut rng = seeded(28, stream::INIT);
    let pool = AttnPool::new(&mut params, &mut rng, "agg0", 8, 2, 2);
    let mut s = Session::new(&params);
    let data = uniform_vec(&mut rng, 6 * 8, -1.0, 1.0);
    let perm = [3usize, 1, 5, 0, 2, 4];
    let permuted: Vec<f64> = perm.iter().flat_map(|&i| data[i * 8..(i + 1) * 8].to_vec()).collect();

    let ta = s.tape.constant(Tensor::new(vec![1, 6, 8], data));
    let tb = s.tape.constant(Tensor::new(vec![1, 6, 8], permuted));
    let a = pool.forward(&mut s, ta);
    let b = pool.forward(&mut s, tb);
    let (av, bv) = (s.tape.value(a.out).data(), s.tape.value(b.out).data());
    let diff = av.iter().zip(bv).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-9, "pooled tokens moved by {diff:.3e} under permutation");
}
