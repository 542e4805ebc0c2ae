//! Library surface of the GP-HM command-line runner: configuration parsing,
//! single-solve execution with artifact writing, benchmark sweeps and the
//! verification suites. The binary in `main.rs` is a thin argument layer over
//! these functions so integration tests can drive them directly.

pub mod bench;
pub mod config;
pub mod runner;
pub mod verify;
