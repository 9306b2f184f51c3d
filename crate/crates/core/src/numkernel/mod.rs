//! Dense `f64` tensors with reverse-mode differentiation.

mod attention_plan;
pub mod counter;
pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use attention_plan::{AttentionGroup, AttentionPlan};
pub use tape::{BatchStats, Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor;
