use rand::Rng;

use super::gate::{compute_distance_map, compute_global_gate, compute_local_gate};
use crate::error::{Error, Result};
use crate::nn::{ConvBnRelu, ParamId, ParamKind, ParamStore, Session};
use crate::tensor::{ConvSpec, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GcmParams {
    /// 1x1 conv + BN + ReLU applied to the pooled feature.
    pub reduce: ConvBnRelu,
    pub alpha: ParamId,
}

impl GcmParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize) -> Self {
        let reduce = ConvBnRelu::new(store, rng, &format!("{name}.reduce"), ConvSpec::new(channels, channels, 1));
        let alpha = store.add(format!("{name}.alpha"), ParamKind::GateScale, Tensor::scalar(1.0));
        GcmParams { reduce, alpha }
    }

    pub fn channels(&self) -> usize {
        self.reduce.out_channels()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.reduce.params();
        v.push(self.alpha);
        v
    }
}

#[derive(Clone, Debug)]
pub struct LcmParams {
    pub lowlevel_reduce: ConvBnRelu,
    /// One 3x3 fusion conv per reuse, each mapping `concat(G, F)` back to the
    /// block width.
    pub fuse: Vec<ConvBnRelu>,
    pub beta: ParamId,
}

impl LcmParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        low_in: usize,
        low_channels: usize,
        high_channels: usize,
        out_channels: usize,
        reuse_count: usize,
    ) -> Self {
        assert!(reuse_count >= 1, "reuse count must be at least 1");
        let lowlevel_reduce =
            ConvBnRelu::new(store, rng, &format!("{name}.low"), ConvSpec::new(low_in, low_channels, 3));
        let fuse = (0..reuse_count)
            .map(|t| {
                let cin = low_channels + if t == 0 { high_channels } else { out_channels };
                ConvBnRelu::new(store, rng, &format!("{name}.fuse{t}"), ConvSpec::new(cin, out_channels, 3))
            })
            .collect();
        let beta = store.add(format!("{name}.beta"), ParamKind::GateScale, Tensor::scalar(1.0));
        LcmParams { lowlevel_reduce, fuse, beta }
    }

    pub fn reuse_count(&self) -> usize {
        self.fuse.len()
    }

    pub fn out_channels(&self) -> usize {
        self.fuse.last().expect("at least one fusion conv").out_channels()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.lowlevel_reduce.params();
        for f in &self.fuse {
            v.extend(f.params());
        }
        v.push(self.beta);
        v
    }
}

#[derive(Clone, Debug)]
pub struct AcbParams {
    pub gcm: GcmParams,
    pub lcm: Option<LcmParams>,
    pub upsample_factor: usize,
}

impl AcbParams {
    pub fn out_channels(&self) -> usize {
        self.lcm.as_ref().map_or(self.gcm.channels(), LcmParams::out_channels)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.gcm.params();
        if let Some(l) = &self.lcm {
            v.extend(l.params());
        }
        v
    }
}

/// `p = ReLU(BN(conv1x1(GAP(A))))`, shape `(n,c,1,1)`.
pub fn compute_global_feature(s: &mut Session, a: Var, params: &GcmParams) -> Result<Var> {
    let sa = s.tape.shape(a);
    if sa.c != params.channels() {
        return Err(Error::Dimension(format!("GCM expects {} channels, got {sa}", params.channels())));
    }
    let pooled = s.tape.global_avg_pool(a)?;
    params.reduce.forward(s, pooled)
}

#[derive(Clone, Copy, Debug)]
pub struct GcmOutput {
    pub output: Var,
    pub gate: Var,
    pub global: Var,
}

/// `c_i = alpha * w^g_i * p + a_i`.
pub fn gcm_forward(s: &mut Session, a: Var, params: &GcmParams, delta: f64) -> Result<GcmOutput> {
    let global = compute_global_feature(s, a, params)?;
    let d = compute_distance_map(s.tape, a, global)?;
    let gate = compute_global_gate(s.tape, d, delta)?;
    let sa = s.tape.shape(a);
    let pmap = s.tape.expand_spatial(global, sa.h, sa.w)?;
    let gated = s.tape.mul(pmap, gate)?;
    let alpha = s.param(params.alpha);
    let scaled = s.tape.scale_by(gated, alpha)?;
    let output = s.tape.add(a, scaled)?;
    Ok(GcmOutput { output, gate, global })
}

/// Gates the refined low-level feature `b` with `beta * W^l`, then fuses it
/// with `e` through the reuse convs: `F_t = conv_t(concat(G, F_{t-1}))`.
pub fn lcm_forward(s: &mut Session, b: Var, e: Var, wl: Var, params: &LcmParams) -> Result<Var> {
    let (sb, se, sw) = (s.tape.shape(b), s.tape.shape(e), s.tape.shape(wl));
    if (sb.n, sb.h, sb.w) != (se.n, se.h, se.w) || (sw.n, sw.c, sw.h, sw.w) != (sb.n, 1, sb.h, sb.w) {
        return Err(Error::Dimension(format!("LCM inputs disagree: low {sb}, high {se}, gate {sw}")));
    }
    let gated = s.tape.mul(b, wl)?;
    let beta = s.param(params.beta);
    let g = s.tape.scale_by(gated, beta)?;
    let mut f = e;
    for conv in &params.fuse {
        let cat = s.tape.concat(g, f)?;
        f = conv.forward(s, cat)?;
    }
    Ok(f)
}

#[derive(Clone, Copy, Debug)]
pub struct AcbOutput {
    pub output: Var,
    pub global_gate: Var,
}

/// GCM on `high`, bilinear upsampling, then (when the block has one) the LCM
/// fed with `low` and the block's own upsampled gate.
pub fn acb_forward(s: &mut Session, high: Var, low: Option<Var>, params: &AcbParams, delta: f64) -> Result<AcbOutput> {
    let gcm = gcm_forward(s, high, &params.gcm, delta)?;
    let sh = s.tape.shape(high);
    let (oh, ow) = (sh.h * params.upsample_factor, sh.w * params.upsample_factor);
    let e = s.tape.resize(gcm.output, oh, ow)?;
    let output = match (low, &params.lcm) {
        (None, None) => e,
        (Some(low), Some(lcm)) => {
            let sl = s.tape.shape(low);
            if (sl.h, sl.w) != (oh, ow) || sl.n != sh.n {
                return Err(Error::Geometry(format!(
                    "low-level feature {sl} must be exactly {}x the high-level feature {sh}",
                    params.upsample_factor
                )));
            }
            let b = lcm.lowlevel_reduce.forward(s, low)?;
            let wl = compute_local_gate(s.tape, gcm.gate, oh, ow)?;
            lcm_forward(s, b, e, wl, lcm)?
        }
        _ => {
            return Err(Error::Geometry("a low-level feature must be given exactly when the block has an LCM".into()))
        }
    };
    Ok(AcbOutput { output, global_gate: gcm.gate })
}
