//! Tensors, reverse-mode differentiation and the optimizer.

pub mod adam;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Graph, LeafGrads, Var};
pub use params::{Gradients, Init, ParamId, ParamStore, Session, StoreKind};
pub use tensor::{Scalar, Tensor};
