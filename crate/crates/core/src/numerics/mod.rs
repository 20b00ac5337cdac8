//! Dense arrays, the differentiable op set, layers, optimizers and gradient checking.

pub mod array;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod param;

pub use array::NumericArray;
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{Dense, Linear, Mlp, MlpTape, PRelu};
pub use ops::{cosine_similarity, matmul, matmul_backward, normalize_rows, prelu};
pub use optim::{clip_grad_norm, AdamConfig, OptimizerState};
pub use param::{Parameter, Params};
