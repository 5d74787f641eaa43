//! Deterministic simulated block device.
//!
//! Service times are sampled from the configured latency model by a per-handle
//! random stream (derived from the device seed and the handle id), plus a
//! penalty per already-outstanding request across the device. Completion due
//! times are computed on the submitting thread's clock, so under virtual time
//! the whole device is a deterministic function of (seed, submitted sequence,
//! clock advances); under a wall clock it behaves like a disk with the same
//! latency distribution.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::time::{from_micros_f64, ThreadEnv};

use super::{
    read_latency_file, BlockDevice, Completion, DeviceHandle, DeviceProfile, LatencyModel,
    LruCache, PayloadSource, ReadRequest,
};

enum ResolvedModel {
    Constant(f64),
    Lognormal { mu: f64, sigma: f64 },
    Empirical(Vec<f64>),
}

impl ResolvedModel {
    /// Sampled latency in microseconds, always > 0.
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            ResolvedModel::Constant(us) => *us,
            ResolvedModel::Lognormal { mu, sigma } => {
                // Box-Muller; kept inline for bit-stable sampling.
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                (mu + sigma * z).exp()
            }
            ResolvedModel::Empirical(samples) => samples[rng.gen_range(0..samples.len())],
        }
    }
}

struct SimShared {
    source: Arc<dyn PayloadSource>,
    model: ResolvedModel,
    penalty_us: f64,
    queue_depth: usize,
    seed: u64,
    outstanding: AtomicUsize,
    cache: Option<Mutex<LruCache>>,
}

/// Simulated device; cheap to clone, handles share the device state.
#[derive(Clone)]
pub struct SimDevice {
    shared: Arc<SimShared>,
}

impl SimDevice {
    pub fn new(profile: &DeviceProfile, source: Arc<dyn PayloadSource>) -> Result<Self> {
        profile.validate()?;
        let model = match &profile.latency_model {
            LatencyModel::Constant { us } => ResolvedModel::Constant(*us),
            LatencyModel::Lognormal { mu, sigma } => ResolvedModel::Lognormal {
                mu: *mu,
                sigma: *sigma,
            },
            LatencyModel::Empirical { path } => ResolvedModel::Empirical(read_latency_file(path)?),
        };
        let cache = if profile.cache_capacity > 0 {
            Some(Mutex::new(LruCache::new(profile.cache_capacity)))
        } else {
            None
        };
        Ok(Self {
            shared: Arc::new(SimShared {
                source,
                model,
                penalty_us: profile.concurrency_penalty_us,
                queue_depth: profile.queue_depth,
                seed: profile.seed,
                outstanding: AtomicUsize::new(0),
                cache,
            }),
        })
    }
}

impl BlockDevice for SimDevice {
    fn open_handle(&self, handle_id: u64) -> Result<Box<dyn DeviceHandle>> {
        let seed = self
            .shared
            .seed
            .wrapping_add(handle_id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        Ok(Box::new(SimHandle {
            shared: Arc::clone(&self.shared),
            rng: ChaCha8Rng::seed_from_u64(seed),
            inflight: BinaryHeap::new(),
            ready: VecDeque::new(),
            seq: 0,
            closed: false,
        }))
    }
}

struct Pending {
    due: Duration,
    seq: u64,
    completion: Completion,
    offset: u64,
    cache_version: u64,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        (self.due, self.seq) == (other.due, other.seq)
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.due, self.seq).cmp(&(other.due, other.seq))
    }
}

pub struct SimHandle {
    shared: Arc<SimShared>,
    rng: ChaCha8Rng,
    inflight: BinaryHeap<Reverse<Pending>>,
    ready: VecDeque<Completion>, // cache hits, visible to the next poll
    seq: u64,
    closed: bool,
}

impl SimHandle {
    fn harvest_due(&mut self, now: Duration) -> Vec<Completion> {
        let mut out: Vec<Completion> = self.ready.drain(..).collect();
        while let Some(Reverse(head)) = self.inflight.peek() {
            if head.due > now {
                break;
            }
            let Reverse(p) = self.inflight.pop().unwrap();
            self.shared.outstanding.fetch_sub(1, Ordering::AcqRel);
            if let Some(cache) = &self.shared.cache {
                cache
                    .lock()
                    .put(p.offset, p.completion.payload.clone(), p.cache_version);
            }
            out.push(p.completion);
        }
        out
    }

    fn earliest_due(&self) -> Option<Duration> {
        self.inflight.peek().map(|Reverse(p)| p.due)
    }
}

impl DeviceHandle for SimHandle {
    fn submit(&mut self, batch: &[ReadRequest], env: &dyn ThreadEnv) -> Result<()> {
        if self.closed {
            return Err(Error::StaleHandle);
        }
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty submit batch".into()));
        }
        if self.inflight.len() + batch.len() > self.shared.queue_depth {
            return Err(Error::QueueDepthExceeded {
                submitted: self.inflight.len() + batch.len(),
                depth: self.shared.queue_depth,
            });
        }
        let now = env.now();
        for req in batch {
            // Cache hits resolve immediately and skip the simulated I/O path.
            if let Some(cache) = &self.shared.cache {
                let version = self.shared.source.version(req.offset);
                if let Some(payload) = cache.lock().get(req.offset, version) {
                    self.ready.push_back(Completion {
                        request_id: req.request_id,
                        payload,
                        service_time: Duration::ZERO,
                    });
                    continue;
                }
            }
            let payload = self.shared.source.read(req.offset, req.length)?;
            if payload.len() != req.length {
                return Err(Error::Device(format!(
                    "source returned {} bytes for a {}-byte read",
                    payload.len(),
                    req.length
                )));
            }
            let version = self.shared.source.version(req.offset);
            let prior = self.shared.outstanding.fetch_add(1, Ordering::AcqRel);
            let latency_us =
                self.shared.model.sample(&mut self.rng).max(0.0) + self.shared.penalty_us * prior as f64;
            let service = from_micros_f64(latency_us);
            self.seq += 1;
            self.inflight.push(Reverse(Pending {
                due: now + service,
                seq: self.seq,
                completion: Completion {
                    request_id: req.request_id,
                    payload,
                    service_time: service,
                },
                offset: req.offset,
                cache_version: version,
            }));
        }
        Ok(())
    }

    fn poll_nonblocking(&mut self, env: &dyn ThreadEnv) -> Result<Vec<Completion>> {
        if self.closed {
            return Err(Error::StaleHandle);
        }
        Ok(self.harvest_due(env.now()))
    }

    fn wait_blocking(&mut self, env: &dyn ThreadEnv) -> Result<(Vec<Completion>, Duration)> {
        if self.closed {
            return Err(Error::StaleHandle);
        }
        let before = env.now();
        let mut out = self.harvest_due(before);
        if !out.is_empty() || self.inflight.is_empty() {
            return Ok((out, Duration::ZERO));
        }
        let due = self.earliest_due().unwrap();
        env.sleep_until(due);
        let now = env.now();
        out = self.harvest_due(now);
        Ok((out, now - before))
    }

    fn outstanding(&self) -> usize {
        self.inflight.len() + self.ready.len()
    }

    fn close(&mut self) {
        self.closed = true;
        let n = self.inflight.len();
        if n > 0 {
            self.shared.outstanding.fetch_sub(n, Ordering::AcqRel);
            self.inflight.clear();
        }
        self.ready.clear();
    }
}
