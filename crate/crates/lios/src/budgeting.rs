//! Overrun-bounded time budgeting.
//!
//! From a short window of recent idle-time samples, solve for the largest
//! per-hop budget `tau_est` whose *expected overrun* — the empirical mean of
//! `max(0, tau_est - tau_i)` — stays within `theta` times the mean idle time:
//!
//! ```text
//! (1/N) * sum_i max(0, tau_est - tau_i)  <=  theta * (1/N) * sum_i tau_i
//! ```
//!
//! The left side is monotonically non-decreasing in `tau_est`, so a binary
//! search finds the boundary. Budgets are bucketed per hop batch size, since
//! I/O concurrency shifts the stall distribution; K-sparse mode counts overrun
//! only on every K-th sample while averaging the allowance over all of them,
//! which targets the long windows of heavily right-skewed idle distributions.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::{as_micros_f64, from_micros_f64};

/// One per-hop stall measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdleSample {
    pub duration: Duration,
    /// Number of reads issued by the hop that produced this sample.
    pub batch_size: usize,
}

/// When update slices are scheduled relative to idle intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    /// Schedule on every interval; budgets conditioned on batch size.
    #[default]
    PerBatch,
    /// Schedule only every `k_sparse`-th interval, amortizing the allowance
    /// over all intervals.
    KSparse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetConfig {
    /// Allowed expected overrun as a fraction of mean idle time.
    pub theta: f64,
    /// Samples retained per bucket (N).
    pub window: usize,
    /// Minimum samples before a bucket's budget is solved; under-sampled
    /// buckets return no budget and callers skip co-execution.
    pub n_min: usize,
    /// Absolute solver tolerance, microseconds.
    pub epsilon_solve_us: f64,
    /// Number of batch-size buckets (B_u); larger batches clamp to the last.
    pub buckets: usize,
    pub mode: BudgetMode,
    pub k_sparse: usize,
    /// Re-solve after this many new samples per bucket.
    pub resolve_period: usize,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            theta: 0.05,
            window: 256,
            n_min: 32,
            epsilon_solve_us: 0.5,
            buckets: 8,
            mode: BudgetMode::PerBatch,
            k_sparse: 8,
            resolve_period: 64,
        }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta < 0.0 {
            return Err(Error::InvalidConfig("theta must be >= 0".into()));
        }
        if self.buckets == 0 || self.window == 0 || self.n_min == 0 || self.k_sparse == 0 {
            return Err(Error::InvalidConfig(
                "budget window, buckets, n_min and k_sparse must be >= 1".into(),
            ));
        }
        if self.epsilon_solve_us <= 0.0 {
            return Err(Error::InvalidConfig("epsilon_solve must be > 0".into()));
        }
        Ok(())
    }
}

/// Sum of `max(0, tau - s)` over scheduled positions; the empirical overrun
/// (times N). Positions are 0-based in arrival order; position `p` is
/// scheduled iff `(p + 1) % k == 0`, so `k = 1` schedules everything.
fn overrun_us(samples: &[f64], tau: f64, k: usize) -> f64 {
    let mut acc = 0f64;
    for (p, &s) in samples.iter().enumerate() {
        if (p + 1) % k == 0 && tau > s {
            acc += tau - s;
        }
    }
    acc
}

fn solve_us(samples: &[f64], theta: f64, k: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("empty sample window".into()));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k_sparse must be >= 1".into()));
    }
    for &s in samples {
        if !(s >= 0.0) {
            return Err(Error::InvalidConfig(format!("negative idle sample {s}")));
        }
    }
    let total: f64 = samples.iter().sum();
    let allowance = theta * total;
    let max_sample = samples.iter().cloned().fold(0.0f64, f64::max);
    let sched: Vec<f64> = samples
        .iter()
        .enumerate()
        .filter(|(p, _)| (p + 1) % k == 0)
        .map(|(_, &s)| s)
        .collect();
    if sched.is_empty() {
        // No scheduled positions in the window: the constraint is vacuous.
        // Fall back to the window maximum rather than an unbounded budget.
        return Ok(max_sample);
    }
    // For tau >= max sample the overrun is m*tau - sum(scheduled), capping all
    // feasible values at (allowance + sum(scheduled)) / m.
    let cap = (allowance + sched.iter().sum::<f64>()) / sched.len() as f64;
    let upper = max_sample.max(cap);
    if overrun_us(samples, upper, k) <= allowance {
        return Ok(upper);
    }
    // Bisect until the interval collapses to adjacent floats: precision far
    // inside the configured epsilon_solve, and every step scales exactly with
    // the samples. `lo` stays feasible throughout (rounding down).
    let mut lo = 0.0f64;
    let mut hi = upper;
    for _ in 0..200 {
        let mid = (lo + hi) / 2.0;
        if mid <= lo || mid >= hi {
            break;
        }
        if overrun_us(samples, mid, k) <= allowance {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Largest budget satisfying the empirical overrun constraint, to within the
/// solver tolerance (rounded down, so the result is always feasible).
pub fn solve_budget_us(samples: &[f64], theta: f64) -> Result<f64> {
    solve_us(samples, theta, 1)
}

/// K-sparse variant: overrun counted only on every `k_sparse`-th sample in
/// arrival order, allowance averaged over the whole window. `k_sparse = 1`
/// reduces exactly to [`solve_budget_us`].
pub fn solve_budget_ksparse_us(samples: &[f64], theta: f64, k_sparse: usize) -> Result<f64> {
    solve_us(samples, theta, k_sparse)
}

pub fn solve_budget(samples: &[Duration], theta: f64) -> Result<Duration> {
    let us: Vec<f64> = samples.iter().map(|&d| as_micros_f64(d)).collect();
    Ok(from_micros_f64(solve_budget_us(&us, theta)?))
}

pub fn solve_budget_ksparse(samples: &[Duration], theta: f64, k_sparse: usize) -> Result<Duration> {
    let us: Vec<f64> = samples.iter().map(|&d| as_micros_f64(d)).collect();
    Ok(from_micros_f64(solve_budget_ksparse_us(&us, theta, k_sparse)?))
}

struct Bucket {
    window: VecDeque<f64>, // microseconds, oldest first
    since_solve: usize,
    solved_once: bool,
}

const NO_BUDGET: u64 = u64::MAX;

/// Per-batch-size sample windows with their solved budgets. `record_sample`
/// and `get_budget` are safe from any thread; readers only load an atomic.
/// Re-solving runs inline on the recording thread under the bucket lock.
pub struct BudgetTable {
    cfg: BudgetConfig,
    buckets: Vec<Mutex<Bucket>>,
    solved: Vec<AtomicU64>, // nanoseconds; NO_BUDGET when unsolved
}

impl BudgetTable {
    pub fn new(cfg: BudgetConfig) -> Result<Self> {
        cfg.validate()?;
        let buckets = (0..cfg.buckets)
            .map(|_| {
                Mutex::new(Bucket {
                    window: VecDeque::with_capacity(cfg.window),
                    since_solve: 0,
                    solved_once: false,
                })
            })
            .collect();
        let solved = (0..cfg.buckets).map(|_| AtomicU64::new(NO_BUDGET)).collect();
        Ok(Self {
            cfg,
            buckets,
            solved,
        })
    }

    pub fn config(&self) -> &BudgetConfig {
        &self.cfg
    }

    #[inline]
    fn bucket_index(&self, batch_size: usize) -> usize {
        batch_size.clamp(1, self.cfg.buckets) - 1
    }

    /// Append a sample to its bucket, evicting the oldest past the window
    /// capacity, and periodically re-solve the bucket's budget.
    pub fn record_sample(&self, sample: IdleSample) {
        let idx = self.bucket_index(sample.batch_size);
        let mut bucket = self.buckets[idx].lock();
        if bucket.window.len() == self.cfg.window {
            bucket.window.pop_front();
        }
        bucket.window.push_back(as_micros_f64(sample.duration));
        bucket.since_solve += 1;
        if bucket.window.len() >= self.cfg.n_min
            && (!bucket.solved_once || bucket.since_solve >= self.cfg.resolve_period)
        {
            let samples: Vec<f64> = bucket.window.iter().copied().collect();
            let k = match self.cfg.mode {
                BudgetMode::PerBatch => 1,
                BudgetMode::KSparse => self.cfg.k_sparse,
            };
            if let Ok(us) = solve_us(&samples, self.cfg.theta, k) {
                self.solved[idx].store(
                    from_micros_f64(us).as_nanos() as u64,
                    Ordering::Release,
                );
                bucket.solved_once = true;
                bucket.since_solve = 0;
            }
        }
    }

    /// Latest solved budget for this batch size, or `None` while the bucket is
    /// under-sampled (callers then skip co-execution). Wait-free.
    pub fn get_budget(&self, batch_size: usize) -> Option<Duration> {
        let ns = self.solved[self.bucket_index(batch_size)].load(Ordering::Acquire);
        if ns == NO_BUDGET {
            None
        } else {
            Some(Duration::from_nanos(ns))
        }
    }

    /// Number of samples currently held for a batch size (test/diagnostics).
    pub fn window_len(&self, batch_size: usize) -> usize {
        self.buckets[self.bucket_index(batch_size)].lock().window.len()
    }
}
