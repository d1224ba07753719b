//! Configuration and command layer behind the `foresight` binary.

pub mod commands;
pub mod config;
