//! The extraction network and its parameters.

pub mod config;
pub mod layers;
pub mod network;
pub mod params;

pub use config::{Conditioning, ModelConfig};
pub use network::{
    concat_features, decode, forward, init_params, load_checkpoint, load_params, model_layout,
    save_params, separator, spatial_encode, spectral_encode, speaker_stack, tcn_block,
    u_conv_block, FeatureMap,
};
pub use params::{ParamSpec, ParameterSet};
