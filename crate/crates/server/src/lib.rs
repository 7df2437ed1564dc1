//! Command line and HTTP service around the simulator core.

pub mod api;
pub mod cli;
pub mod config;
pub mod workflow;
