//! Layer sustainability analysis (LSA) and layer-wise regularized
//! adversarial training (AT-LR) on small dense and convolutional networks.
//!
//! The crate is self-contained: [`tensor`] and [`autodiff`] provide the
//! numerical core, [`nn`] the layers and reference architectures,
//! [`perturb`] the noise models and L-infinity attacks, [`lsa`] the per-layer
//! vulnerability analysis, [`train`] the standard/adversarial/regularized
//! trainers and [`eval`] the robustness grids and exports. [`pipeline`]
//! wires everything to the config file used by the `lsa` binary.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod lsa;
pub mod nn;
pub mod optim;
pub mod perturb;
pub mod pipeline;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use nn::{ActivationTrace, Architecture, LayerKind, LayerSpec, Model};
pub use tensor::Tensor;
