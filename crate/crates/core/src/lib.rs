//! Segmentation across datasets with heterogeneous label sets and intensity
//! distributions: invertible feature harmonization inside a 3D U-Net style
//! backbone plus a gated, prototype-routed output head.

pub mod ablation;
pub mod backbone;
pub mod error;
pub mod gated;
pub mod gradcheck;
pub mod harmony;
pub mod ops;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
