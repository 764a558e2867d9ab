//! Finite-difference gradient suites at three granularities: every tensor
//! primitive, the context modules, and a tiny full network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::acnet::{
    acb_forward, compute_distance_map, compute_global_gate, compute_local_gate, gcm_forward, lcm_forward, AcbParams,
    GcmParams, LcmParams,
};
use crate::error::{Error, Result};
use crate::network::{BackboneConfig, Model, NetworkConfig};
use crate::nn::{ParamId, ParamStore, Session};
use crate::tensor::{grad_check, uniform, BnMode, ConvSpec, GradCheckConfig, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Op,
    Module,
    Network,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "module" => Ok(Scope::Module),
            "network" => Ok(Scope::Network),
            _ => Err(Error::Parameter(format!("unknown scope `{s}`, expected op, module or network"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

/// Tolerance and step used by every suite.
pub fn suite_config(seed: u64) -> GradCheckConfig {
    GradCheckConfig { eps: 1e-5, tol: 1e-4, seed, ..GradCheckConfig::default() }
}

fn run<F>(name: &str, f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let rep = grad_check(f, inputs, cfg)?;
    let (checked, skipped) = (rep.checked(), rep.skipped());
    Ok(CheckOutcome {
        name: name.to_string(),
        max_rel_error: rep.max_rel_error,
        checked,
        skipped,
        passed: rep.passed && checked > 0,
    })
}

/// Checks a function of bound parameters (first `ids.len()` inputs) and data.
fn run_params<F>(name: &str, store: &ParamStore, ids: &[ParamId], data: &[Tensor], cfg: &GradCheckConfig, f: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    let mut inputs: Vec<Tensor> = ids.iter().map(|id| store.value(*id).clone()).collect();
    inputs.extend_from_slice(data);
    run(
        name,
        |tape, vars| {
            let mut st = store.clone();
            let mut s = Session::train(tape, &mut st);
            for (id, v) in ids.iter().zip(vars) {
                s.bind(*id, *v);
            }
            f(&mut s, &vars[ids.len()..])
        },
        &inputs,
        cfg,
    )
}

pub fn op_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let cfg = suite_config(seed);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, h, w) = (2, 3, 5, 6);
    let x = uniform([n, c, h, w], -1.0, 1.0, &mut r);
    let mut out = Vec::new();

    for (label, spec) in [
        ("conv2d 3x3 s1 p1", ConvSpec::new(c, 2, 3).with_bias(true)),
        ("conv2d 3x3 s2 p1", ConvSpec::new(c, 2, 3).stride(2).with_bias(true)),
        ("conv2d 1x1", ConvSpec::new(c, 2, 1).with_bias(true)),
        ("conv2d 3x3 dilation 2", ConvSpec::new(c, 2, 3).dilated(2).with_bias(true)),
        ("conv2d 3x3 dilation 4", ConvSpec::new(c, 2, 3).dilated(4).with_bias(true)),
    ] {
        let wt = uniform(spec.weight_shape(), -1.0, 1.0, &mut r);
        let b = uniform([1, 2, 1, 1], -1.0, 1.0, &mut r);
        out.push(run(label, |t, v| t.conv2d(v[0], v[1], Some(v[2]), &spec), &[x.clone(), wt, b], &cfg)?);
    }

    let xb = uniform([2, 4, 4, 4], -1.0, 1.0, &mut r);
    let gamma = uniform([1, 4, 1, 1], 0.5, 1.5, &mut r);
    let beta = uniform([1, 4, 1, 1], -0.5, 0.5, &mut r);
    let bn_inputs = [xb, gamma, beta];
    out.push(run("batchnorm train", |t, v| Ok(t.batchnorm(v[0], v[1], v[2], BnMode::Train)?.0), &bn_inputs, &cfg)?);
    let (m, var) = (vec![0.1, -0.2, 0.3, 0.0], vec![0.5, 1.5, 2.0, 0.9]);
    out.push(run(
        "batchnorm eval",
        |t, v| Ok(t.batchnorm(v[0], v[1], v[2], BnMode::Eval { mean: &m, var: &var })?.0),
        &bn_inputs,
        &cfg,
    )?);

    let xr = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    out.push(run("relu", |t, v| t.relu(v[0]), &[xr], &cfg)?);
    out.push(run("global_avg_pool", |t, v| t.global_avg_pool(v[0]), &[x.clone()], &cfg)?);
    out.push(run("bilinear upsample", |t, v| t.resize(v[0], 2 * h, 2 * w), &[x.clone()], &cfg)?);
    out.push(run("bilinear resize", |t, v| t.resize(v[0], h + 2, w - 3), &[x.clone()], &cfg)?);
    let other = uniform([n, 2, h, w], -1.0, 1.0, &mut r);
    out.push(run("concat", |t, v| t.concat(v[0], v[1]), &[x.clone(), other], &cfg)?);
    let same = uniform([n, c, h, w], -1.0, 1.0, &mut r);
    let gate = uniform([n, 1, h, w], -1.0, 1.0, &mut r);
    let vec = uniform([n, c, 1, 1], -1.0, 1.0, &mut r);
    out.push(run("add", |t, v| t.add(v[0], v[1]), &[x.clone(), same.clone()], &cfg)?);
    out.push(run("mul", |t, v| t.mul(v[0], v[1]), &[x.clone(), same], &cfg)?);
    out.push(run("mul broadcast gate", |t, v| t.mul(v[0], v[1]), &[x.clone(), gate], &cfg)?);
    out.push(run("affine", |t, v| t.affine(v[0], -1.0, 1.0), &[x.clone()], &cfg)?);
    out.push(run("scale_by", |t, v| t.scale_by(v[0], v[1]), &[x.clone(), Tensor::scalar(0.7)], &cfg)?);
    out.push(run("expand_spatial", |t, v| t.expand_spatial(v[0], h, w), &[vec.clone()], &cfg)?);
    out.push(run("distance map", |t, v| compute_distance_map(t, v[0], v[1]), &[x.clone(), vec.clone()], &cfg)?);
    out.push(run(
        "global gate",
        |t, v| {
            let d = compute_distance_map(t, v[0], v[1])?;
            compute_global_gate(t, d, 2.0)
        },
        &[x, vec],
        &cfg,
    )?);
    let wg = uniform([n, 1, 3, 3], 0.1, 1.0, &mut r);
    out.push(run("local gate", |t, v| compute_local_gate(t, v[0], 6, 6), &[wg], &cfg)?);
    Ok(out)
}

pub fn module_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let cfg = suite_config(seed);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let gcm = GcmParams::new(&mut store, &mut r, "gcm", 3);
    let a = uniform([2, 3, 4, 4], -1.0, 1.0, &mut r);
    let ids = [gcm.alpha, gcm.reduce.conv.weight, gcm.reduce.bn.gamma, gcm.reduce.bn.beta];
    out.push(run_params("GCM", &store, &ids, &[a], &cfg, |s, v| Ok(gcm_forward(s, v[0], &gcm, 5.0)?.output))?);

    let mut store = ParamStore::new();
    let lcm = LcmParams::new(&mut store, &mut r, "lcm", 3, 2, 3, 4, 3);
    let b = uniform([2, 3, 4, 4], 0.0, 1.0, &mut r);
    let e = uniform([2, 3, 4, 4], -1.0, 1.0, &mut r);
    let wl = uniform([2, 1, 4, 4], 0.0, 0.9, &mut r);
    let ids = [lcm.beta, lcm.lowlevel_reduce.conv.weight, lcm.fuse[0].conv.weight, lcm.fuse[2].bn.gamma];
    out.push(run_params("LCM", &store, &ids, &[b, e, wl], &cfg, |s, v| {
        let reduced = lcm.lowlevel_reduce.forward(s, v[0])?;
        lcm_forward(s, reduced, v[1], v[2], &lcm)
    })?);

    let mut store = ParamStore::new();
    let g = GcmParams::new(&mut store, &mut r, "acb.gcm", 3);
    let l = LcmParams::new(&mut store, &mut r, "acb.lcm", 2, 2, 3, 3, 3);
    let acb = AcbParams { gcm: g, lcm: Some(l), upsample_factor: 2 };
    let high = uniform([2, 3, 2, 2], -1.0, 1.0, &mut r);
    let low = uniform([2, 2, 4, 4], -1.0, 1.0, &mut r);
    let lp = acb.lcm.as_ref().expect("lcm");
    let ids = [acb.gcm.alpha, acb.gcm.reduce.conv.weight, lp.beta, lp.lowlevel_reduce.conv.weight, lp.fuse[1].conv.weight];
    out.push(run_params("ACB", &store, &ids, &[high, low], &cfg, |s, v| {
        Ok(acb_forward(s, v[0], Some(v[1]), &acb, 5.0)?.output)
    })?);
    Ok(out)
}

/// A full three-block network small enough to check coordinate by coordinate.
pub fn tiny_network_config() -> NetworkConfig {
    NetworkConfig {
        backbone: BackboneConfig {
            stem_channels: 3,
            stage_channels: [4, 4, 5, 5],
            convs_per_stage: 1,
            last_stage_dilations: vec![2],
        },
        head_channels: 5,
        acb_channels: (4, 3),
        low_channels: 2,
        aux_channels: 3,
        reuse_count: 2,
        num_classes: 3,
        ..NetworkConfig::default()
    }
}

pub fn network_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let cfg = GradCheckConfig { max_coords: 24, ..suite_config(seed) };
    let model = Model::new(&tiny_network_config(), seed)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = uniform([1, 3, 32, 32], 0.0, 1.0, &mut r);
    let trainable = model.params.trainable_ids();
    let picks: Vec<ParamId> = (0..8).map(|_| trainable[r.random_range(0..trainable.len())]).collect();
    let mut ids: Vec<ParamId> = ["acb1.gcm.alpha", "acb1.lcm.beta", "acb3.gcm.alpha", "backbone.stem.conv.weight"]
        .iter()
        .filter_map(|n| model.params.find(n))
        .chain(picks)
        .collect();
    ids.sort();
    ids.dedup();
    let out = run_params("tiny network (main + aux logits)", &model.params, &ids, &[x], &cfg, |s, v| {
        let o = model.net.forward(s, v[0])?;
        match o.aux_logits {
            Some(aux) => {
                let aux = s.tape.scale(aux, 0.4)?;
                s.tape.concat(o.logits, aux)
            }
            None => Ok(o.logits),
        }
    })?;
    Ok(vec![out])
}

pub fn run_suite(scope: Scope, seed: u64) -> Result<Vec<CheckOutcome>> {
    match scope {
        Scope::Op => op_suite(seed),
        Scope::Module => module_suite(seed),
        Scope::Network => network_suite(seed),
    }
}
