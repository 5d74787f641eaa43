//! Benchmark harness for the `lios` engine: dataset ingestion, ground-truth
//! computation, workload execution with concurrent search and update threads,
//! and metrics reporting with paired no-co-execution baselines.

pub mod dataset;
pub mod report;
pub mod workload;
