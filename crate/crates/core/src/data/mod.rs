//! Synthetic scenes, netpbm rasters, manifests, confusion-matrix metrics and
//! gate heatmaps.

mod heatmap;
mod metrics;
pub mod pnm;
mod sample;
pub mod synth;

pub use heatmap::{export_gate_heatmap, quantize};
pub use metrics::{miou_pixacc, update_confusion, ConfusionMatrix, Scores};
pub use sample::{
    image_to_raster, load_manifest, load_sample, raster_to_image, save_dataset, save_sample, LabelMap,
    SegmentationSample, IGNORE_INDEX,
};
pub use synth::{synth_generate, synth_generate_range, SynthConfig, CLASS_NAMES};
