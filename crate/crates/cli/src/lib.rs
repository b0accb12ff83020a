//! Pipeline stages, configuration, metrics and reporting behind the `lbq` binary.

pub mod config;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod report;
pub mod stages;
