use std::path::Path;

use super::pnm::{self, Raster};
use crate::acnet::GateField;
use crate::error::{Error, Result};
use crate::tensor::kernels::nearest_resize_u8;

/// `floor(clamp(v, 0, 1) * 255)`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).floor() as u8
}

/// Writes sample `n` of `gate` as a PGM, optionally enlarged to `view` with
/// nearest-neighbour sampling.
pub fn export_gate_heatmap(gate: &GateField, n: usize, path: &Path, view: Option<(usize, usize)>) -> Result<()> {
    let s = gate.values().shape();
    if n >= s.n {
        return Err(Error::Dimension(format!("sample {n} out of range for gate {s}")));
    }
    let plane = s.plane();
    let q: Vec<u8> = gate.values().data()[n * plane..][..plane].iter().map(|&v| quantize(v)).collect();
    let raster = match view {
        Some((h, w)) => Raster::new(w, h, 1, nearest_resize_u8(&q, s.h, s.w, h, w)),
        None => Raster::new(s.w, s.h, 1, q),
    };
    pnm::write(path, &raster)
}
