//! Forward kernels and their vector-Jacobian products.
//!
//! Every function here is pure: it reads its inputs and returns fresh
//! tensors. The tape in [`crate::tape`] stitches them together.

mod conv;
mod pointwise;
mod reduce;
mod resample;

pub use conv::{conv3d, conv3d_backward, ConvGeometry};
pub use pointwise::*;
pub use reduce::*;
pub use resample::*;
