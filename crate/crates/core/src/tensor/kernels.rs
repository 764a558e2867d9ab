//! Forward and backward kernels for the non-convolution primitives. These are
//! plain functions over slices; [`super::Tape`] wires them together.

use super::{Shape, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

// ---------------------------------------------------------------- relu

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward(x: &[f64], g: &[f64]) -> Vec<f64> {
    x.iter().zip(g).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()
}

// ---------------------------------------------------------------- pooling

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.plane() == 0 {
        return Err(Error::Geometry(format!("global average pool over empty plane {s}")));
    }
    let inv = 1.0 / s.plane() as f64;
    let data = x.data().chunks(s.plane()).map(|p| p.iter().sum::<f64>() * inv).collect();
    Tensor::from_vec([s.n, s.c, 1, 1], data)
}

pub fn global_avg_pool_backward(in_shape: Shape, g: &[f64]) -> Vec<f64> {
    let inv = 1.0 / in_shape.plane() as f64;
    let mut out = Vec::with_capacity(in_shape.numel());
    for &gv in g {
        out.extend(std::iter::repeat_n(gv * inv, in_shape.plane()));
    }
    out
}

// ---------------------------------------------------------------- bilinear

/// Per-output-coordinate interpolation taps `(lo, hi, weight_of_hi)` using
/// half-pixel centres, `src = (dst + 0.5) * in / out - 0.5`, clamped to the
/// valid range.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 || s.h == 0 || s.w == 0 {
        return Err(Error::Geometry(format!("cannot resize {s} to {out_h}x{out_w}")));
    }
    let ty = bilinear_taps(s.h, out_h);
    let tx = bilinear_taps(s.w, out_w);
    let mut out = Vec::with_capacity(s.n * s.c * out_h * out_w);
    for plane in x.data().chunks(s.plane()) {
        for &(y0, y1, wy) in &ty {
            let r0 = &plane[y0 * s.w..(y0 + 1) * s.w];
            let r1 = &plane[y1 * s.w..(y1 + 1) * s.w];
            for &(x0, x1, wx) in &tx {
                let top = r0[x0] + (r0[x1] - r0[x0]) * wx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * wx;
                out.push(top + (bot - top) * wy);
            }
        }
    }
    Tensor::from_vec([s.n, s.c, out_h, out_w], out)
}

pub fn bilinear_resize_backward(in_shape: Shape, out_h: usize, out_w: usize, g: &[f64]) -> Vec<f64> {
    let s = in_shape;
    let ty = bilinear_taps(s.h, out_h);
    let tx = bilinear_taps(s.w, out_w);
    let mut dx = vec![0.0; s.numel()];
    for (plane, gp) in dx.chunks_mut(s.plane()).zip(g.chunks(out_h * out_w)) {
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let gv = gp[oy * out_w + ox];
                plane[y0 * s.w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                plane[y0 * s.w + x1] += gv * (1.0 - wy) * wx;
                plane[y1 * s.w + x0] += gv * wy * (1.0 - wx);
                plane[y1 * s.w + x1] += gv * wy * wx;
            }
        }
    }
    dx
}

/// Nearest-neighbour resize of a single-channel `u8` raster (labels).
pub fn nearest_resize_u8(src: &[u8], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    let pick = |d: usize, in_len: usize, out_len: usize| {
        (((d as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = pick(oy, h, out_h);
        for ox in 0..out_w {
            out.push(src[sy * w + pick(ox, w, out_w)]);
        }
    }
    out
}

// ---------------------------------------------------------------- concat

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::Dimension(format!("cannot concatenate {sa} with {sb}")));
    }
    let la = sa.c * sa.plane();
    let lb = sb.c * sb.plane();
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data()[n * la..(n + 1) * la]);
        data.extend_from_slice(&b.data()[n * lb..(n + 1) * lb]);
    }
    Tensor::from_vec([sa.n, sa.c + sb.c, sa.h, sa.w], data)
}

/// Splits a concatenated buffer (or its gradient) at the channel boundary.
pub fn split_channels(out: &[f64], sa: Shape, sb: Shape) -> (Vec<f64>, Vec<f64>) {
    let la = sa.c * sa.plane();
    let lb = sb.c * sb.plane();
    let mut da = Vec::with_capacity(sa.numel());
    let mut db = Vec::with_capacity(sb.numel());
    if la + lb == 0 {
        return (da, db);
    }
    for chunk in out.chunks(la + lb) {
        da.extend_from_slice(&chunk[..la]);
        db.extend_from_slice(&chunk[la..]);
    }
    (da, db)
}

// ---------------------------------------------------------------- broadcast

/// How the smaller operand of a binary op maps onto the larger one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    /// `(n, c, 1, 1)` against `(n, c, h, w)`.
    ChannelVector,
    /// `(n, 1, h, w)` against `(n, c, h, w)`.
    SpatialMap,
}

impl Broadcast {
    #[inline]
    pub fn small_index(self, full: Shape, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::ChannelVector => i / full.plane(),
            Broadcast::SpatialMap => (i / (full.c * full.plane())) * full.plane() + i % full.plane(),
        }
    }
}

/// Classifies `small` against `full`.
pub fn broadcast_kind(full: Shape, small: Shape) -> Option<Broadcast> {
    if full == small {
        Some(Broadcast::Same)
    } else if small == Shape::new(full.n, full.c, 1, 1) {
        Some(Broadcast::ChannelVector)
    } else if small == Shape::new(full.n, 1, full.h, full.w) {
        Some(Broadcast::SpatialMap)
    } else {
        None
    }
}

/// Orders two operands as `(full, small, kind, swapped)`.
pub fn resolve_broadcast(a: Shape, b: Shape) -> Result<(Shape, Broadcast, bool)> {
    if let Some(k) = broadcast_kind(a, b) {
        Ok((a, k, false))
    } else if let Some(k) = broadcast_kind(b, a) {
        Ok((b, k, true))
    } else {
        Err(Error::Dimension(format!("shapes {a} and {b} are not broadcast-compatible")))
    }
}

/// Sums a full-size gradient down onto the small operand's shape.
pub fn reduce_to_small(kind: Broadcast, full: Shape, small_len: usize, g: &[f64]) -> Vec<f64> {
    if kind == Broadcast::Same {
        return g.to_vec();
    }
    let mut out = vec![0.0; small_len];
    for (i, v) in g.iter().enumerate() {
        out[kind.small_index(full, i)] += v;
    }
    out
}

// ---------------------------------------------------------------- batchnorm

/// Per-channel statistics of a training-mode batch-norm forward.
#[derive(Clone, Debug)]
pub struct BnSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalisation.
    pub var: Vec<f64>,
    pub count: usize,
}

fn check_bn(x: Shape, gamma: &[f64], beta: &[f64]) -> Result<()> {
    if gamma.len() != x.c || beta.len() != x.c {
        return Err(Error::Dimension(format!(
            "batch norm over {x} given {} gammas and {} betas",
            gamma.len(),
            beta.len()
        )));
    }
    if x.n * x.plane() == 0 {
        return Err(Error::Geometry(format!("batch norm over empty extent {x}")));
    }
    Ok(())
}

pub fn batchnorm_train(x: &Tensor, gamma: &[f64], beta: &[f64]) -> Result<(Vec<f64>, BnSaved)> {
    let s = x.shape();
    check_bn(s, gamma, beta)?;
    let count = s.n * s.plane();
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for (i, plane) in x.data().chunks(s.plane()).enumerate() {
        mean[i % s.c] += plane.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    for (i, plane) in x.data().chunks(s.plane()).enumerate() {
        let m = mean[i % s.c];
        var[i % s.c] += plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

    let mut xhat = Vec::with_capacity(s.numel());
    let mut y = Vec::with_capacity(s.numel());
    for (i, plane) in x.data().chunks(s.plane()).enumerate() {
        let c = i % s.c;
        for &v in plane {
            let h = (v - mean[c]) * inv_std[c];
            xhat.push(h);
            y.push(gamma[c] * h + beta[c]);
        }
    }
    Ok((y, BnSaved { xhat, inv_std, mean, var, count }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_train_backward(
    s: Shape,
    gamma: &[f64],
    saved: &BnSaved,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dbeta = vec![0.0; s.c];
    let mut dgamma = vec![0.0; s.c];
    for (i, (gp, hp)) in g.chunks(s.plane()).zip(saved.xhat.chunks(s.plane())).enumerate() {
        let c = i % s.c;
        dbeta[c] += gp.iter().sum::<f64>();
        dgamma[c] += gp.iter().zip(hp).map(|(a, b)| a * b).sum::<f64>();
    }
    let m = saved.count as f64;
    let mut dx = Vec::with_capacity(s.numel());
    for (i, (gp, hp)) in g.chunks(s.plane()).zip(saved.xhat.chunks(s.plane())).enumerate() {
        let c = i % s.c;
        let k = gamma[c] * saved.inv_std[c] / m;
        for (gv, hv) in gp.iter().zip(hp) {
            dx.push(k * (m * gv - dbeta[c] - hv * dgamma[c]));
        }
    }
    (dx, dgamma, dbeta)
}

pub fn batchnorm_eval(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let s = x.shape();
    check_bn(s, gamma, beta)?;
    if mean.len() != s.c || var.len() != s.c {
        return Err(Error::Dimension(format!("running statistics do not match {s}")));
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Vec::with_capacity(s.numel());
    let mut y = Vec::with_capacity(s.numel());
    for (i, plane) in x.data().chunks(s.plane()).enumerate() {
        let c = i % s.c;
        for &v in plane {
            let h = (v - mean[c]) * inv_std[c];
            xhat.push(h);
            y.push(gamma[c] * h + beta[c]);
        }
    }
    Ok((y, xhat, inv_std))
}

pub fn batchnorm_eval_backward(
    s: Shape,
    gamma: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dbeta = vec![0.0; s.c];
    let mut dgamma = vec![0.0; s.c];
    let mut dx = Vec::with_capacity(s.numel());
    for (i, (gp, hp)) in g.chunks(s.plane()).zip(xhat.chunks(s.plane())).enumerate() {
        let c = i % s.c;
        dbeta[c] += gp.iter().sum::<f64>();
        dgamma[c] += gp.iter().zip(hp).map(|(a, b)| a * b).sum::<f64>();
        dx.extend(gp.iter().map(|gv| gv * gamma[c] * inv_std[c]));
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu_backward(&[-1.0, 0.0, 2.0], &[5.0, 5.0, 5.0]), vec![0.0, 0.0, 5.0]);
    }

    #[test]
    fn pool_mean() {
        let t = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&t).unwrap().data(), &[2.5]);
        let k = Tensor::full([2, 3, 5, 4], -1.75);
        assert!(global_avg_pool(&k).unwrap().data().iter().all(|&v| v == -1.75));
        assert!(matches!(global_avg_pool(&Tensor::zeros([1, 1, 0, 3])), Err(Error::Geometry(_))));
    }

    #[test]
    fn bilinear_keeps_constants_and_fills_from_single_pixel() {
        let t = Tensor::full([1, 1, 2, 2], 7.0);
        let up = bilinear_resize(&t, 8, 8).unwrap();
        assert!(up.data().iter().all(|&v| v == 7.0));
        let one = Tensor::full([2, 2, 1, 1], -0.3);
        let up = bilinear_resize(&one, 5, 3).unwrap();
        assert!(up.data().iter().all(|&v| v == -0.3));
    }

    #[test]
    fn concat_places_first_operand_first() {
        let a = Tensor::full([1, 2, 2, 2], 1.0);
        let b = Tensor::full([1, 3, 2, 2], 2.0);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), Shape::new(1, 5, 2, 2));
        assert_eq!(c.at(0, 1, 1, 1), 1.0);
        assert_eq!(c.at(0, 2, 0, 0), 2.0);
        let empty = Tensor::zeros([1, 0, 2, 2]);
        assert_eq!(concat_channels(&a, &empty).unwrap(), a);
        assert!(concat_channels(&a, &Tensor::zeros([1, 1, 3, 2])).is_err());
    }

    #[test]
    fn broadcast_patterns() {
        let full = Shape::new(2, 3, 4, 5);
        assert_eq!(broadcast_kind(full, Shape::new(2, 3, 1, 1)), Some(Broadcast::ChannelVector));
        assert_eq!(broadcast_kind(full, Shape::new(2, 1, 4, 5)), Some(Broadcast::SpatialMap));
        assert_eq!(broadcast_kind(full, Shape::new(1, 3, 1, 1)), None);
        assert!(resolve_broadcast(Shape::new(2, 1, 4, 5), full).unwrap().2);
    }

    #[test]
    fn batchnorm_constant_channel_outputs_beta() {
        let x = Tensor::full([2, 1, 3, 3], 0.1);
        let (y, _) = batchnorm_train(&x, &[1.3], &[0.25]).unwrap();
        assert!(y.iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn nearest_resize_identity_and_doubling() {
        let src = [1u8, 2, 3, 4];
        assert_eq!(nearest_resize_u8(&src, 2, 2, 2, 2), src.to_vec());
        assert_eq!(nearest_resize_u8(&src, 2, 2, 4, 4)[..4], [1, 1, 2, 2]);
    }
}
