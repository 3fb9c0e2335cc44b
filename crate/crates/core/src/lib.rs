//! Instance-segmentation engine with a self-contained reverse-mode autodiff core.
//!
//! The crate is `no_std` (with `alloc`). Everything here is pure computation:
//! tensors and their gradient tape, the CSP-EfficientNet backbone with spatial
//! attention, FPN / NAS-FPN feature networks, the two-stage detection heads,
//! COCO-style metrics, mask codecs, the synthetic cell generator and the
//! training loop. File and console IO live in the companion `cspdet` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autograd;
pub mod backbone;
pub mod boxes;
pub mod checkpoint;
pub mod data;
pub mod detector;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod neck;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, Mode, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
