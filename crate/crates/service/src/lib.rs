//! Command-line tools and the live wire service for holonav.

pub mod cli;
pub mod config;
pub mod persist;
pub mod pipeline;
pub mod protocol;
pub mod server;
