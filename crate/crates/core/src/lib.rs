//! Training-free pruning of temporal attention in video attention stacks.
//!
//! The pipeline profiles how much attention mass frame tokens send to other
//! frames, ranks prune units (layers or denoising timesteps) by that score,
//! removes temporal attention from the lowest-ranked units and measures the
//! saved work both analytically and with instrumented kernels.

pub mod cli;
pub mod cost;
pub mod error;
pub mod executor;
pub mod model;
pub mod planner;
pub mod profiler;
pub mod tensor_kernel;

pub use error::{Error, Result};
