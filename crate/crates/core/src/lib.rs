//! Degradation synthesis, learnable degradation operators, a recurrent x4
//! video super-resolution generator with its training harness, and the
//! curation and evaluation tooling around them.

pub mod cli;
pub mod curate;
pub mod degrade;
pub mod error;
pub mod eval;
pub mod lbo;
pub mod media;
pub mod rescale;
pub mod tensor;
pub mod train;
pub mod vsr;

pub use error::{Error, Result};
