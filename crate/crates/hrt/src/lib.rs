//! File formats, experiment configuration and the command-line front end
//! for [`hrt_core`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod error;

pub use error::{HrtError, Result};
