//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Only the kernels the beam-prediction networks need are provided: batched
//! 2-D convolution, dense layers, ReLU, BatchNorm, the user-neighbourhood
//! mean used by the graph layers, and a fused softmax / base-10
//! cross-entropy. Gradients are accumulated on a [`Tape`] and consumed by
//! [`Adam`]; [`grad_check`] compares them against central differences.

mod adam;
mod check;
mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_update, Adam, AdamConfig, AdamScalars};
pub use check::{grad_check, relative_error, GradCheckReport, FD_STEP};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_VERSION};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{softmax, BnMode, BnStats, Gradients, Padding, Tape, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor;
