//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)s.

mod batch_norm;
pub(crate) mod kernels;
mod ops;
mod tape;

pub use batch_norm::{batch_norm, RunningStats};
pub use kernels::Conv2dGeom;
pub use ops::concat;
pub use tape::{Tape, Var};

#[allow(unused_imports)]
pub(crate) use ops::{expand, reduce_to};

#[cfg(test)]
mod tests;
