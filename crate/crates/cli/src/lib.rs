//! Pipeline orchestration behind the `lookmark` binary.

pub mod config;
pub mod manifest;
pub mod stages;
