//! Minimal reverse-mode automatic differentiation.

mod gradcheck;
mod optim;
mod tape;

pub use gradcheck::finite_difference_check;
pub use optim::{clip_global_norm, global_norm, AdamConfig, AdamState};
pub use tape::{log_sum_exp, Gradients, Tape, Var};
