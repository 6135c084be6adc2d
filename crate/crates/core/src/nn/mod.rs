//! Parameter storage, convolution layers, and weight initialization.

pub mod init;
pub mod layers;
pub mod params;

pub use init::{init_histogram, init_params, Histogram, InitGain, InitRule, InitScheme};
pub use layers::{make_conv_layer, Conv2d, ConvSpec, Initializer};
pub use params::{Binding, ParamId, ParamStore};
