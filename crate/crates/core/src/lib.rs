//! Differentiable tensor engine and the fuzzy-convolutional segmentation
//! network built on it.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Padding, Var};
pub use net::{ClfSeg, NetworkConfig};
pub use params::{Forward, Mode, ParamStore};
pub use tensor::Tensor;
