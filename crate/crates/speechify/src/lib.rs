//! Command line, file formats and the experiment runner built on
//! `speechify-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod provenance;

pub use error::{AppError, Result};
