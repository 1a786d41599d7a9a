//! Dense tensors, reverse-mode differentiation, optimization and seeded
//! randomness.

mod gradcheck;
mod optim;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use optim::{adam_step, cosine_lr, AdamState, CosineSchedule};
pub use rng::{stream_id, RngStreams};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;
