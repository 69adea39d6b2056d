//! Command-line front end: batch runs, campaigns and the live operator service.

pub mod batch;
pub mod config;
pub mod protocol;
pub mod service;
