//! Data-driven Saak transform.

pub mod classifier;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod features;
pub mod io;
pub mod linalg;
pub mod multistage;
pub mod recos;
pub mod stage;

pub use error::{Error, ErrorKind, Result};
