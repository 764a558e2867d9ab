//! Pixel-adaptive context fusion for semantic segmentation.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: rank-4 `f64` tensors, differentiable primitives, a recording
//!   tape and a finite-difference gradient checker.
//! * [`acnet`]: global and local context gating and the adaptive context block.
//! * [`network`]: a small dilated backbone, the full network and an FCN baseline.
//! * [`training`]: losses, momentum SGD, the poly schedule, augmentation,
//!   training and multi-scale evaluation.
//! * [`data`]: synthetic scenes, netpbm I/O, manifests, metrics and heatmaps.
//! * [`config`]: the line-oriented run configuration.
//! * [`verify`]: finite-difference gradient suites.

pub mod acnet;
pub mod config;
pub mod data;
pub mod error;
pub mod network;
pub mod nn;
pub mod tensor;
pub mod verify;
pub mod training;

pub use error::{Error, Result};

/// Random stream used for weight initialisation.
pub const STREAM_INIT: u64 = 1;
/// Random stream used for augmentation.
pub const STREAM_AUGMENT: u64 = 2;
/// Random stream used by the synthetic scene generator.
pub const STREAM_SYNTH: u64 = 3;
/// Random stream used for the per-epoch batch order.
pub const STREAM_ORDER: u64 = 4;
