//! Minimal differentiable compute core: a fixed layer vocabulary with
//! hand-written backward passes, SGD with momentum, checkpoint I/O and a
//! finite-difference gradient checker.

pub mod checkpoint;
pub(crate) mod gemm;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod optim;
pub mod params;

pub use checkpoint::{checkpoint_load, checkpoint_save, read_tensors, write_tensors, TensorStreamWriter};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{Cache, Conv2d, Layer, Linear};
pub use network::{forward_backward, log_softmax, softmax, softmax_cross_entropy, ForwardBackward, LossHead, Sequential, Trace};
pub use optim::{sgd_step, OptimizerConfig};
pub use params::{Grads, Param, ParamGroup, ParamId, ParamKind, ParamSet};
