//! Minimal deterministic neural-network engine.

mod arch;
mod engine;
pub mod kernels;
mod model;
mod optim;
pub mod zoo;

pub use arch::{Architecture, ConvGeom, LayerKind, LayerSpec};
pub use engine::{
    backward, forward, forward_trace, loss, softmax_xent, DenseParams, Gradients, LayerGrad,
    ParamSource,
};
pub use model::{LayerParams, ModelState};
pub use optim::{sgd_step, LrKind, LrSchedule};
