//! Architectural building blocks.

pub mod aspp;
pub mod boundary;
pub mod decoder;
pub mod fusion;
pub mod layers;
pub mod mbconv;
pub mod scse;
pub mod transformer;

pub use aspp::AsppModule;
pub use boundary::{refine, BoundaryAttention};
pub use decoder::{DecoderStage, SepConv};
pub use fusion::FusionBlock;
pub use layers::{BatchNorm2d, Conv2d, ConvBn, Ctx, LayerNorm, Linear, BN_EPS, BN_MOMENTUM, LN_EPS};
pub use mbconv::{mbconv_param_count, MBConvBlock};
pub use scse::ScseBlock;
pub use transformer::{detokenize, positional_encoding_2d, tokenize, GlobalEncoder, TransformerLayer};
