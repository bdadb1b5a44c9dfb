//! Differentiable numerical primitives: tensors, a reverse-mode tape, layers
//! and a finite-difference verification harness.

mod gradcheck;
mod layers;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, grad_check_params, primitive_suite, relative_error, PRIMITIVE_TOL};
pub use layers::{BatchNorm2d, Conv2d, Linear, LstmCell};
pub use params::{Entry, EntryKind, ParamId, ParamStore, Session, StatUpdate};
pub use tape::{LstmVars, NormMode, RunningStats, Tape, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::{Float, Tensor};
