//! File formats: datasets, checkpoints, run configuration and reports.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod report;

pub use config::{EvalConfig, RunConfig, Seeds};
pub use dataset::{generate_dataset, read_dataset, write_dataset, Dataset, DatasetMeta, GeneratorSpec, TaskData};
