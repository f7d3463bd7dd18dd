use incom_core::io::FormatError;
use incom_core::nn::{ParamId, Params, Session};
use incom_core::opt::Adam;
use incom_core::rng::{seeded, stream, uniform_vec};
use incom_core::tensor::Tensor;
use incom_run::checkpoint::{load, save, Checkpoint, MAGIC, VERSION};
use incom_run::RunError;
use proptest::prelude::*;

fn random_params(seed: u64, n: usize) -> Params<f32> {
    let mut rng = seeded(seed, stream::INIT);
    let mut p = Params::new();
    for i in 0..n {
        let shape = vec![1 + i % 3, 2 + i % 4];
        let len: usize = shape.iter().product();
        let data: Vec<f32> =
            uniform_vec(&mut rng, len, -2.0, 2.0).into_iter().map(|v| v as f32).collect();
        p.insert_raw(&format!("block{}.w{}", i / 2, i), Tensor::new(shape, data));
    }
    p
}

#[test]
fn roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ck");
    let params = random_params(3, 7);
    let mut adam = Adam::new(&params);
    // drive the moments away from zero so they carry real state
    let grads: Vec<_> = (0..params.len())
        .map(|i| {
            let pid = ParamId(i);
            (pid, params.value(pid).map(|v| v * 0.25 + 0.1))
        })
        .collect();
    let mut scratch = params_clone(&params);
    adam.step(&mut scratch, &grads, 1e-3);
    adam.step(&mut scratch, &grads, 1e-3);

    save(&path, "cfg-text", 17, &params, Some(&adam)).unwrap();
    let ck = load(&path).unwrap();
    assert_eq!(ck.config, "cfg-text");
    assert_eq!(ck.step, 17);
    assert_eq!(ck.params.len(), params.len());
    for (i, (name, t)) in ck.params.iter().enumerate() {
        let pid = ParamId(i);
        assert_eq!(name, params.name(pid));
        assert_eq!(t.shape(), params.value(pid).shape());
        let stored: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        let live: Vec<u32> = params.value(pid).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(stored, live, "param {name} not bit-exact");
    }
    let opt = ck.opt.as_ref().unwrap();
    assert_eq!(opt.t, 2);
    for (i, (m, v)) in opt.moments.iter().enumerate() {
        let pid = ParamId(i);
        assert_eq!(m.data(), adam.moment_m(pid).data());
        assert_eq!(v.data(), adam.moment_v(pid).data());
    }
    // no temp file left behind
    assert!(!dir.path().join("a.ck.tmp").exists());
}

fn params_clone(p: &Params<f32>) -> Params<f32> {
    let mut out = Params::new();
    for (name, t) in p.iter() {
        out.insert_raw(name, t.clone());
    }
    out
}

#[test]
fn restore_feeds_get_or_init_and_adam() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.ck");
    let params = random_params(5, 4);
    let mut adam = Adam::new(&params);
    let grads: Vec<_> =
        (0..params.len()).map(|i| (ParamId(i), params.value(ParamId(i)).clone())).collect();
    adam.step(&mut params_clone(&params), &grads, 1e-3);
    save(&path, "snap", 9, &params, Some(&adam)).unwrap();

    let ck = load(&path).unwrap();
    let mut restored = ck.seed_params();
    // get_or_init must adopt the stored tensors, not re-initialize
    for (name, t) in params.iter() {
        let shape = t.shape().to_vec();
        let id = restored.get_or_init(name, &shape, || panic!("{name} should already exist"));
        assert_eq!(restored.value(id).data(), t.data());
    }
    let mut adam2 = Adam::new(&restored);
    ck.restore_adam(&restored, &mut adam2).unwrap();
    assert_eq!(adam2.step_count(), 1);
    for i in 0..params.len() {
        assert_eq!(adam2.moment_m(ParamId(i)).data(), adam.moment_m(ParamId(i)).data());
    }

    // the session still works on restored params
    let mut s = Session::new(&restored);
    let x = s.p(ParamId(0));
    assert!(s.tape.value(x).data()[0].is_finite());
}

#[test]
fn missing_and_corrupt_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = load(&dir.path().join("nope.ck")).unwrap_err();
    assert!(matches!(err, RunError::MissingArtifact(_)));

    let bad = dir.path().join("bad.ck");
    std::fs::write(&bad, b"NOT-A-CK").unwrap();
    let err = load(&bad).unwrap_err();
    assert!(matches!(err, RunError::Format(_)));

    // right magic, wrong version
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(VERSION + 1).to_le_bytes());
    let versioned = dir.path().join("ver.ck");
    std::fs::write(&versioned, bytes).unwrap();
    let err = load(&versioned).unwrap_err();
    assert!(matches!(err, RunError::Format(FormatError::BadVersion { .. })));
}

#[test]
fn checkpoint_without_optimizer_state() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ck");
    let params = random_params(7, 3);
    save(&path, "", 0, &params, None).unwrap();
    let ck = load(&path).unwrap();
    assert!(ck.opt.is_none());
    let restored: Params<f32> = ck.seed_params();
    let mut adam = Adam::new(&restored);
    let err = ck.restore_adam(&restored, &mut adam).unwrap_err();
    assert!(matches!(err, RunError::MissingArtifact(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn roundtrip_arbitrary_tensors(seed in 0u64..1000, n in 1usize..6, step in 0u64..u64::MAX) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ck");
        let params = random_params(seed, n);
        save(&path, "prop", step, &params, None).unwrap();
        let ck: Checkpoint = load(&path).unwrap();
        prop_assert_eq!(ck.step, step);
        prop_assert_eq!(ck.params.len(), n);
        for (i, (name, t)) in ck.params.iter().enumerate() {
            prop_assert_eq!(name.as_str(), params.name(ParamId(i)));
            prop_assert_eq!(t.data(), params.value(ParamId(i)).data());
        }
    }
}
