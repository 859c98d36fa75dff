//! Dense `f64` tensors, the primitive operations the model is built from,
//! reverse-mode gradients and finite-difference verification.

pub mod checkpoint;
mod conv;
pub(crate) mod gemm;
pub mod gradcheck;
mod graph;
pub mod lossops;
mod norm;
pub mod params;
mod recurrent;
mod shape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, grad_check_params, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, StatUpdate, Var};
pub use norm::BatchStats;
pub use params::{BufferId, ParamId, ParamStore, Parameter};
pub use shape::ChunkGeometry;
pub use tensor::Tensor;
