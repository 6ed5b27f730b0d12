//! Run configuration and the commands of the `ocnet` binary.

pub mod config;
pub mod pipeline;

pub use config::RunConfig;
