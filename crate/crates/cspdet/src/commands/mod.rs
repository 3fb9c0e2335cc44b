pub mod classify;
pub mod eval;
pub mod infer;
pub mod tools;
pub mod train;
