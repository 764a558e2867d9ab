//! A small dilated backbone, the cascaded context network and a dilated FCN
//! baseline sharing the same backbone and head.

mod backbone;
mod checkpoint;
mod model;

pub use backbone::{Backbone, BackboneConfig, Features, OUTPUT_STRIDE};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{Architecture, Inference, Model, NetOutput, Network, NetworkConfig};
