// NaN-rejecting comparisons like `!(x > 0.0)` are used deliberately in
// validation code.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::excessive_precision)]

pub mod baselines;
pub mod densities;
pub mod error;
pub mod fit;
pub mod hmm;
mod numeric;
pub mod shrinkage;
pub mod simulate;

pub use error::{Error, Result};
