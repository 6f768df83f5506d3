pub mod benchmark;
pub mod error;
pub mod eval;
pub mod io;
pub mod mcmc;
pub mod model;
mod par;
mod serde_util;
pub mod stats;
pub mod vb;

pub use error::{Error, Result};
