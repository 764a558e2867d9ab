//! 2-D convolution: a direct-loop reference path and a patch-matrix
//! (im2col + GEMM) fast path. Both compute the same cross-correlation.

use rayon::prelude::*;

use super::{Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvAlgo {
    Direct,
    Im2col,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Square kernel, stride 1, "same" padding for odd kernels, no bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
            bias: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    /// Sets the dilation and the padding that keeps odd kernels size-preserving.
    pub fn dilated(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = dilation * (self.kernel.0 / 2);
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel.0, self.kernel.1)
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    fn check_params(&self) -> Result<()> {
        if self.stride == 0 || self.dilation == 0 || self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(Error::Geometry(format!(
                "stride, dilation and kernel must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// `floor((H + 2p - d(k-1) - 1) / s) + 1` per axis.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.check_params()?;
        let axis = |len: usize, k: usize| -> Option<usize> {
            let span = self.dilation * (k - 1) + 1;
            let padded = len + 2 * self.padding;
            (padded >= span).then(|| (padded - span) / self.stride + 1)
        };
        match (axis(h, self.kernel.0), axis(w, self.kernel.1)) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
            _ => Err(Error::Geometry(format!(
                "convolution output is empty for input {h}x{w} with {self:?}"
            ))),
        }
    }

    /// Validates operand shapes and returns the output shape.
    pub fn output_shape(&self, input: Shape, weight: Shape, bias: Option<Shape>) -> Result<Shape> {
        if input.c != self.in_channels {
            return Err(Error::Dimension(format!(
                "conv expects {} input channels, got {input}",
                self.in_channels
            )));
        }
        if weight != self.weight_shape() {
            return Err(Error::Dimension(format!(
                "conv weight {weight} does not match {}",
                self.weight_shape()
            )));
        }
        match (self.bias, bias) {
            (true, Some(b)) if b == Shape::new(1, self.out_channels, 1, 1) => {}
            (false, None) => {}
            (_, b) => {
                return Err(Error::Dimension(format!(
                    "conv bias flag {} inconsistent with bias operand {b:?}",
                    self.bias
                )))
            }
        }
        let (oh, ow) = self.output_hw(input.h, input.w)?;
        Ok(Shape::new(input.n, self.out_channels, oh, ow))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == 1 && self.padding == 0
    }
}

/// Gradients of a convolution. Entries are `None` when not requested.
#[derive(Debug, Default)]
pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub fn forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
    algo: ConvAlgo,
) -> Result<Tensor> {
    let out_shape = spec.output_shape(input.shape(), weight.shape(), bias.map(Tensor::shape))?;
    let mut out = match algo {
        ConvAlgo::Direct => direct_forward(input, weight, spec, out_shape),
        ConvAlgo::Im2col => im2col_forward(input, weight, spec, out_shape),
    };
    if let Some(b) = bias {
        let plane = out_shape.plane();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let v = b.data()[i % out_shape.c];
            chunk.iter_mut().for_each(|o| *o += v);
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub fn backward(
    input: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    grad_out: &[f64],
    out_shape: Shape,
    algo: ConvAlgo,
    need_input: bool,
    need_weight: bool,
) -> ConvGrads {
    let (input_grad, weight_grad) = match algo {
        ConvAlgo::Direct => direct_backward(input, weight, spec, grad_out, out_shape, need_input, need_weight),
        ConvAlgo::Im2col => im2col_backward(input, weight, spec, grad_out, out_shape, need_input, need_weight),
    };
    let bias = spec.bias.then(|| {
        let plane = out_shape.plane();
        let mut db = vec![0.0; out_shape.c];
        for (i, chunk) in grad_out.chunks(plane).enumerate() {
            db[i % out_shape.c] += chunk.iter().sum::<f64>();
        }
        db
    });
    ConvGrads { input: input_grad, weight: weight_grad, bias }
}

/// Input coordinate sampled by output `o` and kernel tap `k`, if inside the image.
#[inline]
fn source(o: usize, k: usize, spec: &ConvSpec, len: usize) -> Option<usize> {
    let pos = (o * spec.stride + k * spec.dilation) as isize - spec.padding as isize;
    (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
}

fn direct_forward(input: &Tensor, weight: &Tensor, spec: &ConvSpec, os: Shape) -> Vec<f64> {
    let is = input.shape();
    let (kh, kw) = spec.kernel;
    let mut out = vec![0.0; os.numel()];
    for n in 0..os.n {
        for co in 0..os.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut acc = 0.0;
                    for ci in 0..is.c {
                        for ky in 0..kh {
                            let Some(iy) = source(oy, ky, spec, is.h) else { continue };
                            for kx in 0..kw {
                                let Some(ix) = source(ox, kx, spec, is.w) else { continue };
                                acc += input.at(n, ci, iy, ix) * weight.at(co, ci, ky, kx);
                            }
                        }
                    }
                    out[os.index(n, co, oy, ox)] = acc;
                }
            }
        }
    }
    out
}

fn direct_backward(
    input: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    grad_out: &[f64],
    os: Shape,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let is = input.shape();
    let ws = weight.shape();
    let (kh, kw) = spec.kernel;
    let mut dx = need_input.then(|| vec![0.0; is.numel()]);
    let mut dw = need_weight.then(|| vec![0.0; ws.numel()]);
    for n in 0..os.n {
        for co in 0..os.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let g = grad_out[os.index(n, co, oy, ox)];
                    for ci in 0..is.c {
                        for ky in 0..kh {
                            let Some(iy) = source(oy, ky, spec, is.h) else { continue };
                            for kx in 0..kw {
                                let Some(ix) = source(ox, kx, spec, is.w) else { continue };
                                if let Some(dx) = dx.as_mut() {
                                    dx[is.index(n, ci, iy, ix)] += g * weight.at(co, ci, ky, kx);
                                }
                                if let Some(dw) = dw.as_mut() {
                                    dw[ws.index(co, ci, ky, kx)] += g * input.at(n, ci, iy, ix);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Unfolds one sample into a `(cin*kh*kw) x (oh*ow)` patch matrix.
fn im2col(sample: &[f64], is: Shape, spec: &ConvSpec, oh: usize, ow: usize, cols: &mut [f64]) {
    let (kh, kw) = spec.kernel;
    let p = oh * ow;
    let mut row = 0;
    for ci in 0..is.c {
        let plane = &sample[ci * is.plane()..(ci + 1) * is.plane()];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    match source(oy, ky, spec, is.h) {
                        None => line.fill(0.0),
                        Some(iy) => {
                            let src = &plane[iy * is.w..(iy + 1) * is.w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = source(ox, kx, spec, is.w).map_or(0.0, |ix| src[ix]);
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Folds a patch-matrix gradient back onto one sample (accumulating).
fn col2im(cols: &[f64], is: Shape, spec: &ConvSpec, oh: usize, ow: usize, sample: &mut [f64]) {
    let (kh, kw) = spec.kernel;
    let p = oh * ow;
    let mut row = 0;
    for ci in 0..is.c {
        let plane = &mut sample[ci * is.plane()..(ci + 1) * is.plane()];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let Some(iy) = source(oy, ky, spec, is.h) else { continue };
                    let dst = &mut plane[iy * is.w..(iy + 1) * is.w];
                    for ox in 0..ow {
                        if let Some(ix) = source(ox, kx, spec, is.w) {
                            dst[ix] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `c = a * b` (+ `c` when `accumulate`) with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers size every operand so that the largest strided
    // offset stays within its slice, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col_forward(input: &Tensor, weight: &Tensor, spec: &ConvSpec, os: Shape) -> Vec<f64> {
    let is = input.shape();
    let k = spec.fan_in();
    let p = os.plane();
    let in_len = is.c * is.plane();
    let mut out = vec![0.0; os.numel()];
    out.par_chunks_mut(os.c * p).enumerate().for_each(|(n, dst)| {
        let sample = &input.data()[n * in_len..(n + 1) * in_len];
        if spec.is_pointwise() {
            gemm(os.c, k, p, weight.data(), (k, 1), sample, (p, 1), dst, false);
        } else {
            let mut cols = vec![0.0; k * p];
            im2col(sample, is, spec, os.h, os.w, &mut cols);
            gemm(os.c, k, p, weight.data(), (k, 1), &cols, (p, 1), dst, false);
        }
    });
    out
}

fn im2col_backward(
    input: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    grad_out: &[f64],
    os: Shape,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let is = input.shape();
    let k = spec.fan_in();
    let p = os.plane();
    let in_len = is.c * is.plane();
    let out_len = os.c * p;

    let per_sample: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..os.n)
        .into_par_iter()
        .map(|n| {
            let sample = &input.data()[n * in_len..(n + 1) * in_len];
            let dy = &grad_out[n * out_len..(n + 1) * out_len];
            let cols = (need_weight && !spec.is_pointwise()).then(|| {
                let mut cols = vec![0.0; k * p];
                im2col(sample, is, spec, os.h, os.w, &mut cols);
                cols
            });
            let dw = need_weight.then(|| {
                let mut dw = vec![0.0; os.c * k];
                let b = cols.as_deref().unwrap_or(sample);
                // dW = dY * cols^T
                gemm(os.c, p, k, dy, (p, 1), b, (1, p), &mut dw, false);
                dw
            });
            let dx = need_input.then(|| {
                // dcols = W^T * dY
                let mut dcols = vec![0.0; k * p];
                gemm(k, os.c, p, weight.data(), (1, k), dy, (p, 1), &mut dcols, false);
                if spec.is_pointwise() {
                    dcols
                } else {
                    let mut dx = vec![0.0; in_len];
                    col2im(&dcols, is, spec, os.h, os.w, &mut dx);
                    dx
                }
            });
            (dx, dw)
        })
        .collect();

    let dx = need_input.then(|| {
        let mut dx = Vec::with_capacity(is.numel());
        for (d, _) in &per_sample {
            dx.extend_from_slice(d.as_deref().expect("input gradient requested"));
        }
        dx
    });
    // Summed in batch order so the result does not depend on scheduling.
    let dw = need_weight.then(|| {
        let mut acc = vec![0.0; os.c * k];
        for (_, d) in &per_sample {
            for (a, v) in acc.iter_mut().zip(d.as_deref().expect("weight gradient requested")) {
                *a += v;
            }
        }
        acc
    });
    (dx, dw)
}
