//! Library half of the `lrtp` binary: archive I/O, run configuration,
//! report rendering, and the command implementations. The binary is a thin
//! argument parser over these modules, and the integration tests drive them
//! both in-process and through the compiled executable.

pub mod archive;
pub mod commands;
pub mod config;
pub mod report;
