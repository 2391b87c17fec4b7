#![cfg_attr(not(test), no_std)]
// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod baselines;
pub mod env;
pub mod error;
pub mod estimation;
pub mod linalg;
pub mod mflq;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
