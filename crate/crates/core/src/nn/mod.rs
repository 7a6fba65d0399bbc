//! Dense tensors, reverse-mode differentiation, layers and the optimizer.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod param;
pub mod tensor;

pub use gradcheck::{check_gradients, check_gradients_against, GradCheckEntry, GradCheckReport, ABS_FLOOR};
pub use graph::{Graph, TokenSource, Var};
pub use layers::{
    apply_linear, compute_loss, kaiming_uniform, layer_norm, loss_value, softmax, uniform,
    LayerNorm, Linear, SelfAttention,
};
pub use optim::{AdamW, AdamWConfig};
pub use param::{Gradients, ParamId, ParamStore, Parameter, Role, Scope};
pub use tensor::Tensor;
