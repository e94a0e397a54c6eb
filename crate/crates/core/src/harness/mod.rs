//! Synthetic data, run configuration and the experiment commands.

pub mod commands;
pub mod config;
pub mod data;
pub mod gradcheck;

pub use config::RunConfig;
pub use data::{DataSplits, Dataset, DatasetSpec, SplitName, Variant};
