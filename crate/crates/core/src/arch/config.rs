use std::fmt;
use std::str::FromStr;

use crate::error::{Result, StoicError};
use crate::numerics::conv_out_extent;

/// Context sequence length of the text-conditioning path (CLIP token count).
pub const CONTEXT_TOKENS: usize = 77;

/// Width of the sinusoidal timestep features fed to the time-embedding linear layer.
pub const TIME_FEATURES: usize = 128;

pub const LAYER_NORM_EPS: f64 = 1e-5;

macro_rules! config_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal $(| $alias:literal)*),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const VARIANTS: &'static [&'static str] = &[$($text),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = StoicError;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($text $(| $alias)* => Ok($name::$variant),)+
                    other => Err(StoicError::Config(format!(
                        "unknown {} `{other}` (expected one of {:?})", stringify!($name), Self::VARIANTS
                    ))),
                }
            }
        }
    };
}

config_enum! {
    /// Initial-convolution geometry: `S1` = {K=3, S=1, P=1}, `S2` = {K=2, S=2, P=0}.
    StrideVariant { S1 => "1" | "S1" | "s1", S2 => "2" | "S2" | "s2" }
}

config_enum! {
    /// Where the timestep plane joins the image features.
    TimeConcat { BeforeConv => "before_conv", AfterConv => "after_conv" }
}

config_enum! {
    DecoderReduce { Linear => "linear", Slice => "slice" }
}

config_enum! {
    DecoderConv { Conv => "conv", ConvTranspose => "conv_transpose" }
}

config_enum! {
    InitialNonlinearity { Gelu => "gelu", None => "none" }
}

config_enum! {
    InitialNorm { None => "none", BatchNorm => "batch_norm" }
}

impl StrideVariant {
    /// `(kernel, stride, padding)` of the initial convolution.
    pub fn geometry(self) -> (usize, usize, usize) {
        match self {
            StrideVariant::S1 => (3, 1, 1),
            StrideVariant::S2 => (2, 2, 0),
        }
    }

    pub fn stride(self) -> usize {
        self.geometry().1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageDims {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageDims {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextConfig {
    pub tokens: usize,
    pub token_dim: usize,
}

impl ContextConfig {
    pub fn new(token_dim: usize) -> Self {
        ContextConfig {
            tokens: CONTEXT_TOKENS,
            token_dim,
        }
    }
}

/// Full description of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct StoicConfig {
    pub stride: StrideVariant,
    pub image: ImageDims,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub time_concat: TimeConcat,
    pub context: Option<ContextConfig>,
    pub decoder_reduce: DecoderReduce,
    pub decoder_conv: DecoderConv,
    pub initial_nonlinearity: InitialNonlinearity,
    pub initial_norm: InitialNorm,
}

impl StoicConfig {
    /// Configuration with the default choices for everything but the core sizes.
    pub fn new(
        stride: StrideVariant,
        image: ImageDims,
        embed_dim: usize,
        num_blocks: usize,
    ) -> Self {
        StoicConfig {
            stride,
            image,
            embed_dim,
            num_blocks,
            heads: Self::default_heads(embed_dim),
            mlp_ratio: 4.0,
            time_concat: TimeConcat::AfterConv,
            context: None,
            decoder_reduce: DecoderReduce::Slice,
            decoder_conv: Self::default_decoder_conv(stride),
            initial_nonlinearity: InitialNonlinearity::Gelu,
            initial_norm: InitialNorm::None,
        }
    }

    /// One head per 64 channels, at least one.
    pub fn default_heads(embed_dim: usize) -> usize {
        (embed_dim / 64).max(1)
    }

    pub fn default_decoder_conv(stride: StrideVariant) -> DecoderConv {
        match stride {
            StrideVariant::S1 => DecoderConv::Conv,
            StrideVariant::S2 => DecoderConv::ConvTranspose,
        }
    }

    pub fn with_context(mut self, token_dim: usize) -> Self {
        self.context = Some(ContextConfig::new(token_dim));
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(StoicError::Config(msg));
        let ImageDims {
            channels,
            height,
            width,
        } = self.image;
        if channels == 0 || height == 0 || width == 0 {
            return bad(format!(
                "image dims must be positive, got {channels}x{height}x{width}"
            ));
        }
        if self.embed_dim == 0 || self.num_blocks == 0 {
            return bad("embed_dim and num_blocks must be positive".into());
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return bad(format!(
                "mlp_ratio {} gives an empty hidden layer",
                self.mlp_ratio
            ));
        }
        if self.stride == StrideVariant::S2 {
            if height % 2 != 0 || width % 2 != 0 {
                return bad(format!(
                    "stride-2 variant needs even image extents, got {height}x{width}"
                ));
            }
            if self.decoder_conv == DecoderConv::Conv {
                return bad("stride-2 variant cannot restore resolution with a plain conv decoder; use conv_transpose".into());
            }
        }
        if self.decoder_reduce == DecoderReduce::Slice && channels > self.embed_dim {
            return bad(format!(
                "slice reduce needs channels {channels} <= embed_dim {}",
                self.embed_dim
            ));
        }
        if let Some(ctx) = self.context {
            if ctx.tokens == 0 || ctx.token_dim == 0 {
                return bad("context tokens and token_dim must be positive".into());
            }
        }
        Ok(())
    }

    /// Spatial extent after the initial convolution.
    pub fn grid(&self) -> (usize, usize) {
        let (k, s, p) = self.stride.geometry();
        let h = conv_out_extent(self.image.height, k, s, p).unwrap_or(0);
        let w = conv_out_extent(self.image.width, k, s, p).unwrap_or(0);
        (h, w)
    }

    /// Sequence length `T = H_o · W_o` seen by the core blocks.
    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    pub fn init_conv_in_channels(&self) -> usize {
        self.image.channels + usize::from(self.time_concat == TimeConcat::BeforeConv)
    }

    /// Length of the flattened timestep plane.
    pub fn time_plane_len(&self) -> usize {
        match self.time_concat {
            TimeConcat::BeforeConv => self.image.height * self.image.width,
            TimeConcat::AfterConv => self.tokens(),
        }
    }

    /// `(kernel, stride, padding)` of the decoder's final spatial layer.
    pub fn decoder_geometry(&self) -> (usize, usize, usize) {
        self.stride.geometry()
    }
}
