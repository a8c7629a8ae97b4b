//! MarsSeg: encoder-decoder semantic segmentation of planetary terrain.
//!
//! The crate carries its own small tensor library with reverse-mode
//! autodiff ([`autograd`]), the feature-enhancement blocks ([`blocks`]),
//! the full network ([`network`]), the deep-supervised objective and
//! evaluation metrics ([`loss`], [`metrics`]), dataset handling ([`data`])
//! and the training loop with checkpointing ([`train`]).

// Var arithmetic is fallible, so it cannot implement the std::ops traits;
// `!(x >= 0.0)` comparisons are meant to reject NaN.
#![allow(
    clippy::should_implement_trait,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod autograd;
pub mod blocks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use labels::{LabelMap, IGNORE};
pub use network::{Model, Network, NetworkConfig};
pub use tensor::{DType, Element, Tensor};
