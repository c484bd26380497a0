//! Dense tensors, a reverse-mode tape and the AdamW optimizer.

mod optim;
mod params;
mod serial;
mod tape;
mod tensor;

pub use optim::{AdamWConfig, OptimizerState, Schedule, StepReport};
pub use params::{GradientMap, ParamId, ParamStore};
pub use serial::TensorRecord;
pub use tape::{AttnMask, Gradients, Tape, Var};
pub use tensor::Tensor;
