// `!(x > y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffcore;
mod error;
pub mod evalkit;
pub mod model;
pub mod msa;
pub mod objective;
pub mod policy;
pub mod simenv;
pub mod trainer;

pub use error::{Error, Result};
