//! Network building blocks and the three assembled models: the generative
//! encoder/decoder pair and the U-Net segmenter.

pub mod blocks;
mod generative;
mod params;
mod unet;

pub use generative::{reparameterize, DecoderOutput, EncoderOutput, GenerativeNet, NetConfig};
pub use params::{finite_diff_check_params, Bound, InitSpec, LayerParams, ParamBuilder, ParamEntry};
pub use unet::{UNet, UNetConfig};
