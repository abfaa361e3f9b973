//! Dense matrices, reverse-mode differentiation, layers, Adam, and a
//! finite-difference gradient checker.

mod adam;
mod gradcheck;
mod layers;
mod param;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, relative_error, EntryError, GradCheckConfig, GradCheckReport};
pub use layers::{dense_stack, glorot, linear_layer, Activation, Dense, DEFAULT_LEAKY_SLOPE};
pub use param::{Bound, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, NormKind, Tape, Var};
pub use tensor::{matmul, matmul_nt, matmul_tn, pairwise_sq_dists, softmax_rows, Tensor};

pub(crate) use tape::normalize_with_degrees;
