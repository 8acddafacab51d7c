//! Relaxed virtual-memory litmus checking for an Armv8-A subset.

pub mod candidate;
pub mod descriptor;
pub mod dot;
pub mod error;
pub mod event;
pub mod isa;
pub mod lex;
pub mod litmus;
pub mod model;
pub mod rel;
pub mod runner;
pub mod setup;
pub mod walk;

pub use error::{Error, Result};
