//! Turns a minimal editing intent (an image, a source word and a target
//! word) into grounded source/edited prompt pairs for diffusion editors, and
//! measures the results.

pub mod cli;
pub mod config;
pub mod edit;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod image;
pub mod injector;
pub mod optimizer;
pub mod service;
pub mod token_filter;
pub mod types;
pub mod vocab;

pub use error::{Error, Result};
