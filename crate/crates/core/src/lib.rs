//! MedLiteNet: a lightweight CNN-Transformer network for binary skin-lesion
//! segmentation, built on a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use autodiff::{Activation, Conv2dSpec, Graph, Mode, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamKind, ParamStore};
pub use tensor::{Float, Tensor};
