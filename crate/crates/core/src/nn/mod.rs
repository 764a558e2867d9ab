//! Parameter storage and the layer building blocks shared by the context
//! modules and the network.

mod layers;
mod params;

pub use layers::{BatchNorm2d, Conv2d, ConvBnRelu};
pub use params::{Param, ParamId, ParamKind, ParamStore, Session};
