//! Reverse-mode autodiff over 2-D tensors and the layers built on it.

pub mod adaln;
pub mod attention;
pub mod batch;
pub mod gcn;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use adaln::{modulate, AdaLn};
pub use attention::{masked_attention, rope_rotate, AttentionMask, AttentionOptions, MultiHeadAttention};
pub use batch::{pad_batch, PaddedLayout};
pub use gcn::{normalized_adjacency, GcnLayer};
pub use gradcheck::{grad_check, jitter_parameters, projection_loss, GradCheckConfig, GradCheckReport};
pub use graph::{AttnShape, Gradients, Graph, SparseMatrix, Var};
pub use layers::{Linear, RmsNorm, Sandwich, SwiGlu};
pub use optim::{AdamW, AdamWConfig, StepStats};
pub use params::{Bound, Init, ParamId, Parameter, ParameterStore};
pub use tensor::{matmul, Real, Tensor};
