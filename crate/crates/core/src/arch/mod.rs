//! The network: a strided initial convolution feeding N identical pre-LN transformer
//! blocks, then a light decoder back to image resolution.

mod config;
mod model;
mod params;

pub use config::{
    ContextConfig, DecoderConv, DecoderReduce, ImageDims, InitialNonlinearity, InitialNorm,
    StoicConfig, StrideVariant, TimeConcat, CONTEXT_TOKENS, LAYER_NORM_EPS, TIME_FEATURES,
};
pub use model::{
    apply_context, core_block, core_stack, core_stack_materialized, decoder, embed_input,
    initial_conv, model_grad_check, sinusoidal_features, stoic_forward, time_embed, StoicModel,
    StreamingStack,
};
pub use params::{
    block_prefix, build_params, param_specs, randomize_params, Init, ParamSpec, ParamStore,
    INIT_STD,
};

use crate::error::Result;
use crate::numerics::conv_out_extent;

/// Spatial output size of the initial convolution: `⌊(n + 2P − K)/S⌋ + 1` per axis.
pub fn conv_out_dims(
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    Ok((
        conv_out_extent(h, kernel, stride, padding)?,
        conv_out_extent(w, kernel, stride, padding)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_out_dims_examples() {
        assert_eq!(conv_out_dims(32, 32, 3, 1, 1).unwrap(), (32, 32));
        assert_eq!(conv_out_dims(64, 64, 2, 2, 0).unwrap(), (32, 32));
        assert_eq!(conv_out_dims(1, 1, 1, 1, 0).unwrap(), (1, 1));
        assert!(conv_out_dims(1, 1, 3, 1, 0).is_err());
    }
}
