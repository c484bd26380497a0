pub mod dualbranch;
pub mod error;
pub mod flowhead;
pub mod gradcore;
pub mod harness;
pub mod infodiag;
pub mod scalar;
pub mod seqmodel;
pub mod trajectory;
pub mod worldgen;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use trajectory::ActionTrajectory;

pub type Tensor64 = gradcore::Tensor<f64>;
pub type Tensor32 = gradcore::Tensor<f32>;
pub type Tape64 = gradcore::Tape<f64>;
pub type ParamStore64 = gradcore::ParamStore<f64>;
pub type Trainer64 = dualbranch::Trainer<f64>;
pub type Trainer32 = dualbranch::Trainer<f32>;
