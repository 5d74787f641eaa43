//! Disk-based graph ANNS engine that co-executes index-update work inside
//! search-side I/O stall windows.
//!
//! Search threads spend most of a query stalled on per-hop record reads. This
//! crate harvests those stalls for update work through three mechanisms:
//! resumable pruning splits the dominant update computation into
//! checkpoint-able slices that fit a single stall window; overrun-bounded
//! budgeting solves, from recent idle-time samples, the largest per-hop slice
//! budget whose expected overrun stays within a fraction `theta` of the mean
//! idle time; and a feedback tuner adapts the fraction of that budget actually
//! granted so end-to-end search latency degradation tracks `theta` — the one
//! user-facing knob.
//!
//! The crate ships a deterministic simulated block device and a virtual-time
//! executor so whole co-execution workloads replay bit-identically; see the
//! `lios-bench` crate for dataset loading, workload running and reporting.

pub mod budgeting;
pub mod error;
pub mod graph_index;
pub mod io_layer;
pub mod prune;
pub mod search;
pub mod time;
pub mod tuner;
pub mod update_engine;
pub mod util;

pub use error::{Error, Result};
pub use graph_index::{Index, IndexConfig, NodeRecord, VectorId};
