//! Parameters, forward-pass context and the basic layers.

mod layers;
mod params;

pub use layers::{BatchNorm2d, Conv2d, ConvBnRelu};
pub use params::{BatchNormSettings, Forward, Mode, ParamEntry, ParamId, ParamKind, ParamStore};
