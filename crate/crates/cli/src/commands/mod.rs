//! Command implementations. Each `run` returns the process exit code:
//! 0 for success, 1 when a verification property failed; argument and
//! config errors bubble up as `Err` and exit 2.

pub mod bench;
pub mod check;
pub mod cost;
pub mod decompose;
pub mod synth;
