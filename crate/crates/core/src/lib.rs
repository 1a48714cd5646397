//! Numerical toolkit for the L0 functional on Ricci flow backgrounds.

pub mod config;
pub mod coupling;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod invariants;
pub mod l0;
pub mod models;
pub mod report;
pub mod transport;
pub mod verify;

pub use error::{Error, Result};
