pub mod baselines;
pub mod datasets;
pub mod dream;
pub mod error;
pub mod evalkit;
pub mod hashing;
pub mod modelzoo;
pub mod nn;
pub mod probing;
pub mod schema;
#[doc(hidden)]
pub mod testkit;

pub use error::{Error, Result};
