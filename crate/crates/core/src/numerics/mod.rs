//! Dense tensors, reverse-mode autodiff, parameter storage and optimization.

mod graph;
mod layers;
mod optim;
mod params;
mod real;
mod tensor;

pub use graph::{AttentionMask, AttnSpec, Graph, MaskSpec, Var, MASK_FILL};
pub use layers::{Embedding, LayerNorm, Linear};
pub use optim::{adam_step, clip_grad_norm, noam_lr, AdamConfig, AdamState, ScheduleConfig};
pub use params::{xavier_uniform, Gradients, Param, ParamId, ParamStore};
pub use real::{gemm, Real};
pub use tensor::{log_softmax_excluding, softmax, Tensor};

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-6;
