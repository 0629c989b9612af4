//! Command-line pipeline around the `dualflow` library: demonstration
//! generation, training, threshold calibration, evaluation and plot export.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
