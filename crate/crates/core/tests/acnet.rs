use acnet_core::acnet::{
    acb_forward, compute_distance_map, compute_global_feature, compute_global_gate, compute_local_gate, gcm_forward,
    lcm_forward, AcbParams, GateField, GcmParams, LcmParams, DISTANCE_EPS, GATE_FLOOR,
};
use acnet_core::nn::{ParamId, ParamStore, Session};
use acnet_core::tensor::{grad_check, uniform, GradCheckConfig, Tape, Tensor, Var};
use acnet_core::verify::{run_suite, Scope};
use acnet_core::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn distance_oracle(a: &Tensor, p: &Tensor) -> Tensor {
    let s = a.shape();
    Tensor::from_fn([s.n, 1, s.h, s.w], |n, _, y, x| {
        let mut acc = 0.0;
        for c in 0..s.c {
            let d = a.at(n, c, y, x) - p.at(n, c, 0, 0);
            acc += d * d;
        }
        (acc + DISTANCE_EPS).sqrt()
    })
}

fn bilinear_oracle(src: &Tensor, oh: usize, ow: usize) -> Tensor {
    let s = src.shape();
    let coord = |dst: usize, inn: usize, out: usize| {
        let c = ((dst as f64 + 0.5) * inn as f64 / out as f64 - 0.5).max(0.0);
        let i0 = (c.floor() as usize).min(inn - 1);
        let i1 = (i0 + 1).min(inn - 1);
        (i0, i1, c - i0 as f64)
    };
    Tensor::from_fn([s.n, s.c, oh, ow], |n, c, y, x| {
        let (y0, y1, fy) = coord(y, s.h, oh);
        let (x0, x1, fx) = coord(x, s.w, ow);
        let top = src.at(n, c, y0, x0) * (1.0 - fx) + src.at(n, c, y0, x1) * fx;
        let bot = src.at(n, c, y1, x0) * (1.0 - fx) + src.at(n, c, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

fn gate(d: Tensor, delta: f64) -> Result<Tensor> {
    let mut t = Tape::new();
    let v = t.constant(d);
    let g = compute_global_gate(&mut t, v, delta)?;
    Ok(t.value(g).clone())
}

#[test]
fn gate_matches_direct_evaluation() {
    let d = Tensor::from_vec([1, 1, 1, 3], vec![0.0, 5.0, 10.0]).unwrap();
    let w = gate(d, 5.0).unwrap();
    let expect = [1.0, 0.367879, 0.135335];
    for (a, b) in w.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    assert_eq!(w.data()[0], 1.0);
    assert!(gate(Tensor::full([2, 1, 3, 3], 4.2), 5.0).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(matches!(gate(Tensor::zeros([1, 1, 1, 1]), 0.0), Err(Error::Parameter(_))));
}

#[test]
fn distance_examples_and_oracle() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_vec([1, 2, 1, 1], vec![3.0, 4.0]).unwrap());
    let p = t.constant(Tensor::zeros([1, 2, 1, 1]));
    let d = compute_distance_map(&mut t, a, p).unwrap();
    assert!((t.value(d).data()[0] - 5.0).abs() < 1e-12);

    let pv = Tensor::from_vec([1, 3, 1, 1], vec![0.5, -1.0, 2.0]).unwrap();
    let av = Tensor::from_fn([1, 3, 4, 4], |_, c, _, _| pv.data()[c]);
    let mut t = Tape::new();
    let (a, p) = (t.constant(av), t.constant(pv));
    let d = compute_distance_map(&mut t, a, p).unwrap();
    assert!(t.value(d).data().iter().all(|&v| v <= DISTANCE_EPS.sqrt() * (1.0 + 1e-9)));

    let mut r = rng(1);
    let av = uniform([1, 8, 4, 4], -2.0, 2.0, &mut r);
    let pv = uniform([1, 8, 1, 1], -1.0, 1.0, &mut r);
    let mut t = Tape::new();
    let (a, p) = (t.constant(av.clone()), t.constant(pv.clone()));
    let d = compute_distance_map(&mut t, a, p).unwrap();
    assert!(t.value(d).max_abs_diff(&distance_oracle(&av, &pv)) <= 1e-12);
}

#[test]
fn local_gate_examples() {
    let local = |wg: Tensor, h, w| {
        let mut t = Tape::new();
        let v = t.constant(wg);
        let l = compute_local_gate(&mut t, v, h, w).unwrap();
        t.value(l).clone()
    };
    assert!(local(Tensor::ones([1, 1, 2, 2]), 8, 8).data().iter().all(|&v| v == 0.0));
    for (h, w) in [(2, 2), (5, 7), (16, 16)] {
        assert!(local(Tensor::full([1, 1, 3, 3], 0.25), h, w).data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }
    let wg = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 0.5, 0.5, 0.25]).unwrap();
    let expect = bilinear_oracle(&wg, 4, 4).map(|v| 1.0 - v);
    assert!(local(wg, 4, 4).max_abs_diff(&expect) <= 1e-12);
}

fn gcm_params(channels: usize, seed: u64) -> (ParamStore, GcmParams) {
    let mut store = ParamStore::new();
    let p = GcmParams::new(&mut store, &mut rng(seed), "gcm", channels);
    (store, p)
}

/// Makes the 1x1 reduce an identity map in eval mode.
fn make_reduce_identity(store: &mut ParamStore, p: &GcmParams, c: usize) {
    store.get_mut(p.reduce.conv.weight).value = Tensor::from_fn([c, c, 1, 1], |o, i, _, _| (o == i) as u8 as f64);
    store.get_mut(p.reduce.bn.gamma).value = Tensor::full([1, c, 1, 1], (1.0f64 + 1e-5).sqrt());
}

#[test]
fn global_feature_examples() {
    let (mut store, p) = gcm_params(3, 2);
    make_reduce_identity(&mut store, &p, 3);
    let consts = [0.5, 1.5, 2.0];
    let a = Tensor::from_fn([1, 3, 4, 5], |_, c, _, _| consts[c]);
    let mut t = Tape::new();
    let mut s = Session::eval(&mut t, &mut store);
    let av = s.tape.constant(a);
    let g = compute_global_feature(&mut s, av, &p).unwrap();
    for (v, c) in t.value(g).data().iter().zip(consts) {
        assert!((v - c).abs() < 1e-12, "{v} vs {c}");
    }

    // zero input: p = ReLU(beta) per channel in eval mode
    let (mut store, p) = gcm_params(2, 3);
    store.get_mut(p.reduce.bn.beta).value = Tensor::from_vec([1, 2, 1, 1], vec![0.7, -0.3]).unwrap();
    let mut t = Tape::new();
    let mut s = Session::eval(&mut t, &mut store);
    let av = s.tape.constant(Tensor::zeros([1, 2, 3, 3]));
    let g = compute_global_feature(&mut s, av, &p).unwrap();
    assert_eq!(t.value(g).data(), &[0.7, 0.0]);

    let (mut store, p) = gcm_params(4, 4);
    let mut t = Tape::new();
    let mut s = Session::eval(&mut t, &mut store);
    let av = s.tape.constant(Tensor::zeros([1, 3, 3, 3]));
    assert!(matches!(compute_global_feature(&mut s, av, &p), Err(Error::Dimension(_))));
}

#[test]
fn gcm_identity_and_broadcast_oracle() {
    let mut r = rng(5);
    let a = uniform([2, 4, 5, 5], -1.0, 1.0, &mut r);
    let (mut store, p) = gcm_params(4, 6);
    store.get_mut(p.alpha).value = Tensor::scalar(0.0);
    let mut t = Tape::new();
    let mut s = Session::train(&mut t, &mut store);
    let av = s.tape.constant(a.clone());
    let out = gcm_forward(&mut s, av, &p, 5.0).unwrap();
    assert_eq!(t.value(out.output), &a);

    let (mut store, p) = gcm_params(4, 7);
    let alpha = 0.8;
    store.get_mut(p.alpha).value = Tensor::scalar(alpha);
    let mut t = Tape::new();
    let mut s = Session::train(&mut t, &mut store);
    let av = s.tape.constant(a.clone());
    let out = gcm_forward(&mut s, av, &p, 5.0).unwrap();
    let (pv, wg) = (t.value(out.global), t.value(out.gate));
    let s = a.shape();
    let expect = Tensor::from_fn(s, |n, c, y, x| alpha * wg.at(n, 0, y, x) * pv.at(n, c, 0, 0));
    let diff = Tensor::from_fn(s, |n, c, y, x| t.value(out.output).at(n, c, y, x) - a.at(n, c, y, x));
    assert!(diff.max_abs_diff(&expect) <= 1e-12);
    GateField::global(wg.clone(), 5.0).unwrap().check_invariants().unwrap();
}

#[test]
fn gcm_scalar_arithmetic() {
    // one channel, one pixel: w = 1, so c = alpha * p + a
    let (mut store, p) = gcm_params(1, 8);
    make_reduce_identity(&mut store, &p, 1);
    store.get_mut(p.reduce.bn.beta).value = Tensor::scalar(-1.0);
    let mut t = Tape::new();
    let mut s = Session::eval(&mut t, &mut store);
    let av = s.tape.constant(Tensor::scalar(3.0));
    let out = gcm_forward(&mut s, av, &p, 5.0).unwrap();
    assert_eq!(t.value(out.gate).data(), &[1.0]);
    assert!((t.value(out.global).data()[0] - 2.0).abs() < 1e-12);
    assert!((t.value(out.output).data()[0] - 5.0).abs() < 1e-12);
}

fn lcm_setup(seed: u64, reuse: usize) -> (ParamStore, LcmParams) {
    let mut store = ParamStore::new();
    let p = LcmParams::new(&mut store, &mut rng(seed), "lcm", 3, 2, 3, 4, reuse);
    (store, p)
}

#[test]
fn lcm_beta_zero_cuts_low_level_gradient() {
    let mut r = rng(9);
    let b = uniform([2, 2, 4, 4], 0.0, 1.0, &mut r);
    let e = uniform([2, 3, 4, 4], -1.0, 1.0, &mut r);
    let wl = uniform([2, 1, 4, 4], 0.0, 0.99, &mut r);
    let run = |beta: f64, wl: &Tensor| {
        let (mut store, p) = lcm_setup(10, 3);
        store.get_mut(p.beta).value = Tensor::scalar(beta);
        let mut t = Tape::new();
        let mut s = Session::train(&mut t, &mut store);
        let bv = s.tape.leaf(b.clone(), true);
        let ev = s.tape.leaf(e.clone(), true);
        let wv = s.tape.constant(wl.clone());
        let out = lcm_forward(&mut s, bv, ev, wv, &p).unwrap();
        let val = t.value(out).clone();
        t.backward(out).unwrap();
        (val, t.grad(bv).map(<[f64]>::to_vec))
    };
    let (y0, gb0) = run(0.0, &wl);
    assert!(gb0.unwrap().iter().all(|&g| g == 0.0));
    let (y1, gb1) = run(1.0, &Tensor::zeros(wl.shape()));
    assert!(gb1.unwrap().iter().all(|&g| g == 0.0));
    assert!(y0.max_abs_diff(&y1) == 0.0);
    let (_, gb2) = run(1.0, &wl);
    assert!(gb2.unwrap().iter().any(|&g| g != 0.0));
}

#[test]
fn lcm_rejects_spatial_mismatch() {
    let (mut store, p) = lcm_setup(11, 2);
    let mut t = Tape::new();
    let mut s = Session::train(&mut t, &mut store);
    let b = s.tape.constant(Tensor::zeros([1, 2, 4, 4]));
    let e = s.tape.constant(Tensor::zeros([1, 3, 2, 2]));
    let w = s.tape.constant(Tensor::zeros([1, 1, 4, 4]));
    assert!(matches!(lcm_forward(&mut s, b, e, w, &p), Err(Error::Dimension(_))));
}

fn acb_setup(with_lcm: bool, seed: u64) -> (ParamStore, AcbParams) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let gcm = GcmParams::new(&mut store, &mut r, "acb.gcm", 3);
    let lcm = with_lcm.then(|| LcmParams::new(&mut store, &mut r, "acb.lcm", 2, 2, 3, 3, 3));
    (store, AcbParams { gcm, lcm, upsample_factor: 2 })
}

#[test]
fn acb_shapes_and_geometry() {
    let mut r = rng(12);
    let high = uniform([2, 3, 4, 4], -1.0, 1.0, &mut r);
    let (mut store, p) = acb_setup(false, 13);
    let mut t = Tape::new();
    let mut s = Session::train(&mut t, &mut store);
    let hv = s.tape.constant(high.clone());
    let out = acb_forward(&mut s, hv, None, &p, 5.0).unwrap();
    assert_eq!(t.shape(out.output).dims(), [2, 3, 8, 8]);
    assert_eq!(t.shape(out.global_gate).dims(), [2, 1, 4, 4]);

    let (mut store, p) = acb_setup(true, 14);
    for (low_hw, ok) in [(8, true), (6, false), (16, false)] {
        let mut t = Tape::new();
        let mut s = Session::train(&mut t, &mut store);
        let hv = s.tape.constant(high.clone());
        let lv = s.tape.constant(uniform([2, 2, low_hw, low_hw], 0.0, 1.0, &mut r));
        let res = acb_forward(&mut s, hv, Some(lv), &p, 5.0);
        match (ok, res) {
            (true, Ok(out)) => assert_eq!(t.shape(out.output).dims(), [2, 3, 8, 8]),
            (false, Err(Error::Geometry(_))) => {}
            (_, other) => panic!("low {low_hw}: {other:?}"),
        }
    }
    let mut t = Tape::new();
    let mut s = Session::train(&mut t, &mut store);
    let hv = s.tape.constant(high);
    assert!(matches!(acb_forward(&mut s, hv, None, &p, 5.0), Err(Error::Geometry(_))));
}

/// Runs `f` with `ids` bound to the leading inputs of a gradient check.
fn check_module<F>(store: &ParamStore, ids: &[ParamId], data: &[Tensor], f: F)
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    let mut inputs: Vec<Tensor> = ids.iter().map(|id| store.value(*id).clone()).collect();
    inputs.extend_from_slice(data);
    let rep = grad_check(
        |tape, vars| {
            let mut st = store.clone();
            let mut s = Session::train(tape, &mut st);
            for (id, v) in ids.iter().zip(vars) {
                s.bind(*id, *v);
            }
            f(&mut s, &vars[ids.len()..])
        },
        &inputs,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(rep.passed, "max rel error {} ({:?})", rep.max_rel_error, rep.inputs);
    assert!(rep.checked() > rep.skipped(), "{} checked, {} skipped", rep.checked(), rep.skipped());
}

#[test]
fn gate_ops_pass_gradient_check() {
    let mut r = rng(15);
    let a = uniform([2, 3, 3, 4], -1.0, 1.0, &mut r);
    let p = uniform([2, 3, 1, 1], -1.0, 1.0, &mut r);
    check_module(&ParamStore::new(), &[], &[a.clone(), p.clone()], |s, v| compute_distance_map(s.tape, v[0], v[1]));
    check_module(&ParamStore::new(), &[], &[a, p], |s, v| {
        let d = compute_distance_map(s.tape, v[0], v[1])?;
        compute_global_gate(s.tape, d, 2.0)
    });
    let wg = uniform([2, 1, 3, 3], 0.1, 1.0, &mut r);
    check_module(&ParamStore::new(), &[], &[wg], |s, v| compute_local_gate(s.tape, v[0], 6, 6));
}

#[test]
fn gcm_passes_gradient_check() {
    for seed in [16, 17] {
        let (store, p) = gcm_params(3, seed);
        let a = uniform([2, 3, 4, 4], -1.0, 1.0, &mut rng(seed + 100));
        check_module(&store, &p.params()[..3].iter().copied().chain([p.alpha]).collect::<Vec<_>>(), &[a], |s, v| {
            Ok(gcm_forward(s, v[0], &p, 5.0)?.output)
        });
    }
}

#[test]
fn lcm_passes_gradient_check() {
    let (store, p) = lcm_setup(18, 3);
    let mut r = rng(19);
    let b = uniform([2, 2, 4, 4], 0.0, 1.0, &mut r);
    let e = uniform([2, 3, 4, 4], -1.0, 1.0, &mut r);
    let wl = uniform([2, 1, 4, 4], 0.0, 0.9, &mut r);
    let ids = vec![p.beta, p.fuse[0].conv.weight, p.fuse[2].bn.gamma];
    check_module(&store, &ids, &[b, e, wl], |s, v| lcm_forward(s, v[0], v[1], v[2], &p));
}

#[test]
fn acb_passes_gradient_check() {
    let (store, p) = acb_setup(true, 20);
    let mut r = rng(21);
    let high = uniform([2, 3, 2, 2], -1.0, 1.0, &mut r);
    let low = uniform([2, 2, 4, 4], -1.0, 1.0, &mut r);
    let lcm = p.lcm.as_ref().unwrap();
    let ids = vec![p.gcm.alpha, p.gcm.reduce.conv.weight, lcm.beta, lcm.lowlevel_reduce.conv.weight];
    check_module(&store, &ids, &[high, low], |s, v| Ok(acb_forward(s, v[0], Some(v[1]), &p, 5.0)?.output));
}

#[test]
fn gate_invariants_on_random_inputs() {
    let mut r = rng(22);
    for case in 0..1000 {
        let (n, c) = (r.random_range(1..4), r.random_range(1..6));
        let (h, w) = (r.random_range(1..7), r.random_range(1..7));
        let scale = 10f64.powf(r.random_range(-2.0..2.0));
        let delta = 10f64.powf(r.random_range(-1.0..1.5));
        let a = uniform([n, c, h, w], -scale, scale, &mut r);
        let p = uniform([n, c, 1, 1], -scale, scale, &mut r);
        let mut t = Tape::new();
        let (av, pv) = (t.constant(a), t.constant(p));
        let d = compute_distance_map(&mut t, av, pv).unwrap();
        let wg = compute_global_gate(&mut t, d, delta).unwrap();
        let wl = compute_local_gate(&mut t, wg, 2 * h, 2 * w).unwrap();
        let up = t.resize(wg, 2 * h, 2 * w).unwrap();
        GateField::global(t.value(wg).clone(), delta).unwrap().check_invariants().unwrap();
        GateField::local(t.value(wl).clone()).unwrap().check_invariants().unwrap();
        for (u, l) in t.value(up).data().iter().zip(t.value(wl).data()) {
            assert_eq!(u + l, 1.0, "case {case}");
        }
        let plane = h * w;
        let (dv, gv) = (t.value(d).data(), t.value(wg).data());
        for s in 0..n {
            let ds = &dv[s * plane..][..plane];
            let gs = &gv[s * plane..][..plane];
            for i in 0..plane {
                for j in 0..plane {
                    // strictness holds until the smaller gate reaches the floor
                    if ds[i] < ds[j] && gs[j] > GATE_FLOOR {
                        assert!(gs[i] > gs[j], "case {case}: d {} < {} but w {} <= {}", ds[i], ds[j], gs[i], gs[j]);
                    }
                }
            }
        }
    }
}

#[test]
fn delta_limits() {
    let mut r = rng(23);
    let d = uniform([2, 1, 5, 5], 0.0, 10.0, &mut r);
    let flat = gate(d.clone(), 1e7).unwrap();
    assert!(flat.data().iter().all(|&v| (1.0 - v) < 1e-6));
    let sharp = gate(d.clone(), 1e-6).unwrap();
    for s in 0..2 {
        let ds = &d.data()[s * 25..][..25];
        let k = ds.iter().copied().fold(f64::INFINITY, f64::min);
        for (dv, wv) in ds.iter().zip(&sharp.data()[s * 25..][..25]) {
            assert_eq!(*wv, if *dv == k { 1.0 } else { GATE_FLOOR });
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distance_is_translation_invariant(seed in 0u64..10_000, shift in proptest::collection::vec(-3.0f64..3.0, 3)) {
        let (mut store, p) = gcm_params(3, 24);
        make_reduce_identity(&mut store, &p, 3);
        let a = uniform([1, 3, 4, 4], 4.0, 6.0, &mut rng(seed));
        let shifted = Tensor::from_fn(a.shape(), |n, c, y, x| a.at(n, c, y, x) + shift[c]);
        let dist = |x: Tensor| {
            let mut st = store.clone();
            let mut t = Tape::new();
            let mut s = Session::eval(&mut t, &mut st);
            let v = s.tape.constant(x);
            let g = compute_global_feature(&mut s, v, &p).unwrap();
            let d = compute_distance_map(s.tape, v, g).unwrap();
            t.value(d).clone()
        };
        prop_assert!(dist(a).max_abs_diff(&dist(shifted)) < 1e-10);
    }

    #[test]
    fn local_gate_complements_upsampled_global(seed in 0u64..10_000, h in 1usize..6, w in 1usize..6) {
        let wg = uniform([1, 1, h, w], 1e-3, 1.0, &mut rng(seed));
        let mut t = Tape::new();
        let v = t.constant(wg);
        let wl = compute_local_gate(&mut t, v, 2 * h, 2 * w).unwrap();
        let up = t.resize(v, 2 * h, 2 * w).unwrap();
        for (u, l) in t.value(up).data().iter().zip(t.value(wl).data()) {
            prop_assert_eq!(u + l, 1.0);
        }
    }
}

#[test]
fn op_and_module_suites_pass() {
    for scope in [Scope::Op, Scope::Module] {
        for o in run_suite(scope, 3).unwrap() {
            assert!(o.passed, "{} {:.3e}", o.name, o.max_rel_error);
        }
    }
}
