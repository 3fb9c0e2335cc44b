//! Slice-level forward/backward kernels behind the autograd ops.

pub mod conv;
pub mod interp;
pub mod norm;
pub mod pool;
pub mod roi_align;

pub use conv::ConvGeom;
pub use interp::InterpMode;
pub use pool::{PoolGeom, PoolKind};
