//! Minimal differentiable numerics: tensors, a reverse-mode tape, dense /
//! GRU / convolution layers, Adam, gradient checking and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{content_hash, Checkpoint, CheckpointMetadata, TensorRecord};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use layers::{dense_forward, Activation, Conv2d, Dense, GruCell, Mlp, LEAKY_SLOPE};
pub use optim::{optimizer_step, OptimizerConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Im2ColSpec, Tape, Unary, Var};
pub use tensor::Tensor;
