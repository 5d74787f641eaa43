//! Asynchronous block-device abstraction: a deterministic simulated backend
//! and a real-file backend behind one submit / poll / wait interface.
//!
//! A device is shared; each search thread opens its own [`DeviceHandle`] and
//! confines submit/poll/wait to it. The simulated backend computes completion
//! times on the caller's [`ThreadEnv`] clock, so it is exactly reproducible
//! under virtual time and behaves like a slow disk under wall clocks. The file
//! backend emulates asynchronous reads with a small thread pool.

mod file;
mod sim;

pub use file::FileDevice;
pub use sim::SimDevice;

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::ThreadEnv;

pub use crate::time::ManualClock;

/// Where read payloads come from. Implemented by the graph index over its
/// record store; `version` lets caches detect overwritten records.
pub trait PayloadSource: Send + Sync {
    fn read(&self, offset: u64, len: usize) -> Result<Vec<u8>>;
    fn version(&self, offset: u64) -> u64;
}

/// One aligned record read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadRequest {
    pub request_id: u64,
    pub offset: u64,
    pub length: usize,
}

/// A finished read: payload plus the device-side service duration
/// (latency model plus any concurrency penalty; zero for cache hits).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub request_id: u64,
    pub payload: Vec<u8>,
    pub service_time: Duration,
}

/// Latency model of the simulated backend. Parameters are configuration, not
/// constants; microseconds throughout.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum LatencyModel {
    Constant { us: f64 },
    /// `exp(mu + sigma * z)` microseconds, `z` standard normal.
    Lognormal { mu: f64, sigma: f64 },
    /// Newline-delimited file of microsecond floats, sampled with replacement.
    Empirical { path: PathBuf },
}

impl Default for LatencyModel {
    fn default() -> Self {
        // Mode near 100us: mode = exp(mu - sigma^2).
        LatencyModel::Lognormal { mu: 4.7, sigma: 0.3 }
    }
}

/// Configuration of the simulated device; part of the run config file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DeviceProfile {
    pub latency_model: LatencyModel,
    /// Added to a request's service time per already-outstanding request.
    pub concurrency_penalty_us: f64,
    pub seed: u64,
    /// Maximum outstanding requests per handle.
    pub queue_depth: usize,
    /// Records held by the device-side LRU cache; 0 disables it.
    pub cache_capacity: usize,
}

impl Default for DeviceProfile {
    fn default() -> Self {
        Self {
            latency_model: LatencyModel::default(),
            concurrency_penalty_us: 5.0,
            seed: 0,
            queue_depth: 64,
            cache_capacity: 0,
        }
    }
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        if self.queue_depth == 0 {
            return Err(Error::InvalidConfig("queue_depth must be >= 1".into()));
        }
        if self.concurrency_penalty_us < 0.0 {
            return Err(Error::InvalidConfig("concurrency penalty must be >= 0".into()));
        }
        if let LatencyModel::Constant { us } = self.latency_model {
            if us < 0.0 {
                return Err(Error::InvalidConfig("constant latency must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// A shared device which hands out per-thread handles.
pub trait BlockDevice: Send + Sync {
    /// `handle_id` keys the handle's private random stream on simulated
    /// backends; callers pass a stable thread index for reproducibility.
    fn open_handle(&self, handle_id: u64) -> Result<Box<dyn DeviceHandle>>;
}

/// Per-thread submission context. All operations are confined to the owning
/// thread; the underlying device object is safe for concurrent handles.
pub trait DeviceHandle: Send {
    /// Submit a batch asynchronously. Requests that hit the device cache are
    /// resolved immediately and show up in the next poll with zero service
    /// time, bypassing the simulated I/O path.
    fn submit(&mut self, batch: &[ReadRequest], env: &dyn ThreadEnv) -> Result<()>;

    /// Harvest already-finished completions without blocking.
    fn poll_nonblocking(&mut self, env: &dyn ThreadEnv) -> Result<Vec<Completion>>;

    /// Block until at least one outstanding request finishes (or return
    /// immediately if none are outstanding); also reports the time spent
    /// waiting for idle-window sampling.
    fn wait_blocking(&mut self, env: &dyn ThreadEnv) -> Result<(Vec<Completion>, Duration)>;

    fn outstanding(&self) -> usize;

    /// Invalidate the handle; later operations fail with a stale-handle error.
    fn close(&mut self);
}

/// Read a newline-delimited file of microsecond floats.
pub fn read_latency_file(path: &std::path::Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let us: f64 = line.parse().map_err(|_| {
            Error::Format(format!("latency file line {}: not a float", lineno + 1))
        })?;
        if !(us >= 0.0) {
            return Err(Error::Format(format!(
                "latency file line {}: negative value",
                lineno + 1
            )));
        }
        out.push(us);
    }
    if out.is_empty() {
        return Err(Error::Format("latency file has no samples".into()));
    }
    Ok(out)
}

/// Fixed-capacity LRU over record payloads, versioned so overwritten records
/// never serve stale bytes.
pub(crate) struct LruCache {
    cap: usize,
    map: std::collections::HashMap<u64, LruEntry>,
    order: std::collections::VecDeque<(u64, u64)>, // (generation, offset)
    gen: u64,
}

struct LruEntry {
    payload: Vec<u8>,
    version: u64,
    gen: u64,
}

impl LruCache {
    pub fn new(cap: usize) -> Self {
        Self {
            cap,
            map: std::collections::HashMap::new(),
            order: std::collections::VecDeque::new(),
            gen: 0,
        }
    }

    pub fn get(&mut self, offset: u64, current_version: u64) -> Option<Vec<u8>> {
        let gen = {
            let entry = self.map.get_mut(&offset)?;
            if entry.version != current_version {
                self.map.remove(&offset);
                return None;
            }
            self.gen += 1;
            entry.gen = self.gen;
            self.gen
        };
        self.order.push_back((gen, offset));
        self.map.get(&offset).map(|e| e.payload.clone())
    }

    pub fn put(&mut self, offset: u64, payload: Vec<u8>, version: u64) {
        if self.cap == 0 {
            return;
        }
        self.gen += 1;
        self.map.insert(
            offset,
            LruEntry {
                payload,
                version,
                gen: self.gen,
            },
        );
        self.order.push_back((self.gen, offset));
        while self.map.len() > self.cap {
            let Some((gen, offset)) = self.order.pop_front() else {
                break;
            };
            // Skip superseded recency markers.
            if self.map.get(&offset).is_some_and(|e| e.gen == gen) {
                self.map.remove(&offset);
            }
        }
        // Trim stale markers so the queue stays bounded.
        while let Some(&(gen, offset)) = self.order.front() {
            if self.map.get(&offset).is_some_and(|e| e.gen == gen) {
                break;
            }
            self.order.pop_front();
        }
    }
}
