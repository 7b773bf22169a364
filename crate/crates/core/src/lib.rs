pub mod autograd;
pub mod config;
pub mod data;
pub mod elements;
pub mod engine;
pub mod error;
pub mod losses;
pub mod mi;
pub mod models;
pub mod nn;
pub mod queue;
pub mod relation;
pub mod report;
pub mod runner;

pub use error::{CrcdError, Result};
