//! Dense-matrix numeric core: matrices, a reverse-mode tape, MLP layers,
//! Adam, the poly learning-rate schedule, and a finite-difference checker.

pub mod adam;
pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod tape;

pub use adam::{adam_step, poly_lr, AdamState};
pub use gradcheck::finite_diff_check;
pub use matrix::Matrix;
pub use mlp::{
    bind_params, mlp_forward, mlp_forward_tape, Activation, BoundParams, MlpSpec, ParamStore,
};
pub use tape::{Grads, Tape, Var};
