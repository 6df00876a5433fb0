//! Core library: numerics, architecture, diffusion, complexity accounting, data, training.

pub mod arch;
pub mod complexity;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod numerics;
pub mod training;

pub use error::{CheckpointError, Result, StoicError};
