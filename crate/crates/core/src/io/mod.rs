//! Configuration, file output and instrumentation for the experiment drivers.

pub mod config;
pub mod driver;
pub mod output;
pub mod perf;
