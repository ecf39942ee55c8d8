//! Configuration files, input patterns and output tables.

pub mod app;
pub mod config;
pub mod emit;
pub mod ingest;

pub use app::execute;
pub use config::{Mode, RunConfig};
pub use ingest::ingest_pattern;
