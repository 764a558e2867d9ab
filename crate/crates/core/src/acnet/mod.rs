//! Context gating: the global context module (GCM), the local context module
//! (LCM) and the adaptive context block (ACB) that cascades them.
//!
//! The GCM pulls every pixel towards a pooled global feature `p` with a
//! weight `w^g_i = exp(-(d_i - k) / delta)` that is largest where the pixel
//! already resembles `p`. The LCM uses the complement `1 - up(W^g)` to decide
//! how much low-level detail each pixel receives.

mod block;
mod gate;

pub use block::{
    acb_forward, compute_global_feature, gcm_forward, lcm_forward, AcbOutput, AcbParams, GcmOutput, GcmParams,
    LcmParams,
};
pub use gate::{compute_distance_map, compute_global_gate, compute_local_gate, DISTANCE_EPS, GATE_FLOOR};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default gate smoothing.
pub const DEFAULT_DELTA: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    Global,
    Local,
}

/// A per-pixel gate of shape `(n,1,h,w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateField {
    values: Tensor,
    kind: GateKind,
    delta: Option<f64>,
}

impl GateField {
    pub fn global(values: Tensor, delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::Parameter(format!("gate smoothing delta must be positive, got {delta}")));
        }
        Self::checked(values, GateKind::Global, Some(delta))
    }

    pub fn local(values: Tensor) -> Result<Self> {
        Self::checked(values, GateKind::Local, None)
    }

    fn checked(values: Tensor, kind: GateKind, delta: Option<f64>) -> Result<Self> {
        if values.shape().c != 1 {
            return Err(Error::Dimension(format!("gate field must have one channel, got {}", values.shape())));
        }
        Ok(GateField { values, kind, delta })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn kind(&self) -> GateKind {
        self.kind
    }

    pub fn delta(&self) -> Option<f64> {
        self.delta
    }

    /// Global gates lie in `(0, 1]` with each sample's maximum exactly 1;
    /// local gates lie in `[0, 1)`.
    pub fn check_invariants(&self) -> Result<()> {
        let plane = self.values.shape().plane();
        for (n, sample) in self.values.data().chunks(plane).enumerate() {
            let ok = match self.kind {
                GateKind::Global => {
                    sample.iter().all(|&v| v > 0.0 && v <= 1.0) && sample.iter().any(|&v| v == 1.0)
                }
                GateKind::Local => sample.iter().all(|&v| (0.0..1.0).contains(&v)),
            };
            if !ok {
                return Err(Error::Evaluation(format!("{:?} gate of sample {n} violates its range", self.kind)));
            }
        }
        Ok(())
    }
}
