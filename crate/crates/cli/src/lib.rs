//! The `recast` command line and its HTTP service.

pub mod api;
pub mod cli;
pub mod ops;
