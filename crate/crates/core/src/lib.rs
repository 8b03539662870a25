//! Numeric core: dense `f64` tensors, a recording tape for reverse-mode
//! gradients, SGD with momentum, finite-difference gradient checks and a
//! binary checkpoint format.
//!
//! Everything runs in double precision on the CPU. Learnable operations in
//! the rest of the workspace are compositions of [`Var`] operations or
//! custom nodes pushed with [`Tape::push_op`].

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use optim::Sgd;
pub use param::{Init, ParamBuilder, ParamId, ParamSpec, ParamStore, Parameter};
pub use rng::Rng;
pub use tape::{ParamGrads, Tape, Var};
pub use tensor::Tensor;
