//! Layers, encoders and parameter containers.

mod encoder;
mod layers;
mod params;

pub use encoder::{update_running, BatchStats, EncoderSpec, BN_MOMENTUM};
pub use layers::{conv_block, cross_entropy, global_avg_pool, linear, ConvBlock};
pub use params::{uniform_init, Bound, ParamSet};
