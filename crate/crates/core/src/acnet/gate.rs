use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Shape, Tape, Tensor, Var};

/// Added under the square root so the distance is differentiable where
/// `a_i == p`.
pub const DISTANCE_EPS: f64 = 1e-12;

/// Lower bound on global gate values. Keeps `w^g > 0` and `1 - w^g < 1`
/// representable once the exponential would underflow.
pub const GATE_FLOOR: f64 = f64::EPSILON;

struct DistanceOp;

impl CustomOp for DistanceOp {
    fn name(&self) -> &str {
        "distance_map"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (a, p) = (inputs[0], inputs[1]);
        let s = a.shape();
        let plane = s.plane();
        let mut ga = vec![0.0; a.numel()];
        let mut gp = vec![0.0; p.numel()];
        for n in 0..s.n {
            for c in 0..s.c {
                let pc = p.data()[n * s.c + c];
                let base = (n * s.c + c) * plane;
                let mut acc = 0.0;
                for i in 0..plane {
                    let k = g[n * plane + i] * (a.data()[base + i] - pc) / output.data()[n * plane + i];
                    ga[base + i] = k;
                    acc += k;
                }
                gp[n * s.c + c] = -acc;
            }
        }
        vec![Some(ga), Some(gp)]
    }
}

/// `d_i = sqrt(sum_c (a_i - p)^2 + eps)` per pixel, shape `(n,1,h,w)`.
pub fn compute_distance_map(tape: &mut Tape, a: Var, p: Var) -> Result<Var> {
    let (sa, sp) = (tape.shape(a), tape.shape(p));
    if sp != Shape::new(sa.n, sa.c, 1, 1) {
        return Err(Error::Dimension(format!("distance map needs p of shape ({},{},1,1), got {sp}", sa.n, sa.c)));
    }
    let plane = sa.plane();
    let (av, pv) = (tape.value(a).data(), tape.value(p).data());
    let mut out = vec![0.0; sa.n * plane];
    for n in 0..sa.n {
        let o = &mut out[n * plane..(n + 1) * plane];
        for c in 0..sa.c {
            let pc = pv[n * sa.c + c];
            let ch = &av[(n * sa.c + c) * plane..][..plane];
            for (acc, &x) in o.iter_mut().zip(ch) {
                *acc += (x - pc) * (x - pc);
            }
        }
        for v in o.iter_mut() {
            *v = (*v + DISTANCE_EPS).sqrt();
        }
    }
    let out = Tensor::from_vec([sa.n, 1, sa.h, sa.w], out)?;
    tape.custom(&[a, p], out, Box::new(DistanceOp))
}

struct GlobalGateOp {
    delta: f64,
}

impl CustomOp for GlobalGateOp {
    fn name(&self) -> &str {
        "global_gate"
    }

    fn backward(&self, _: &[&Tensor], output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let d = output.data().iter().zip(g).map(|(&w, g)| if w > GATE_FLOOR { -g * w / self.delta } else { 0.0 });
        vec![Some(d.collect())]
    }
}

/// `w_i = exp(-(d_i - k) / delta)` with `k` the per-sample minimum of `d`.
/// `k` is a stop-gradient constant. Values are floored at [`GATE_FLOOR`].
pub fn compute_global_gate(tape: &mut Tape, d: Var, delta: f64) -> Result<Var> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Parameter(format!("gate smoothing delta must be positive and finite, got {delta}")));
    }
    let s = tape.shape(d);
    if s.c != 1 {
        return Err(Error::Dimension(format!("distance map must have one channel, got {s}")));
    }
    let plane = s.plane();
    let mins: Vec<f64> =
        tape.value(d).data().chunks(plane).map(|c| c.iter().copied().fold(f64::INFINITY, f64::min)).collect();
    let k = tape.detach(mins);
    let out: Vec<f64> = tape
        .value(d)
        .data()
        .chunks(plane)
        .zip(&k)
        .flat_map(|(c, &k)| c.iter().map(move |&v| (-(v - k) / delta).exp().max(GATE_FLOOR)))
        .collect();
    let out = Tensor::from_vec(s, out)?;
    tape.custom(&[d], out, Box::new(GlobalGateOp { delta }))
}

/// `W^l = 1 - up(W^g)` at `out_h x out_w`.
pub fn compute_local_gate(tape: &mut Tape, wg: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let up = tape.resize(wg, out_h, out_w)?;
    tape.affine(up, -1.0, 1.0)
}
