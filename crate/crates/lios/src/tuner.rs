//! Adaptive utilization tuning: a feedback-driven state machine that adjusts
//! the fraction of the solved budget actually granted to update slices, so
//! measured end-to-end search latency degradation tracks the target `theta`.
//!
//! Phases: Recording profiles a no-update latency baseline (co-execution
//! suspended); BinarySearch bisects the utilization ratio over [0, 1] against
//! the feasibility predicate `latency / baseline <= 1 + theta`, disabling
//! co-execution if even the bisection floor fails; Steady nudges the ratio up
//! after compliant epochs and down after violations, returning through
//! Rebaseline to Recording after too many consecutive violations or a search
//! failure. The ratio is best-effort control of phase-average latency, not a
//! per-sample bound.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::as_micros_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TunerPhase {
    Recording,
    BinarySearch,
    Steady,
    Rebaseline,
}

impl std::fmt::Display for TunerPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TunerPhase::Recording => "recording",
            TunerPhase::BinarySearch => "binary_search",
            TunerPhase::Steady => "steady",
            TunerPhase::Rebaseline => "rebaseline",
        };
        f.write_str(s)
    }
}

/// Which latency statistics the violation test observes; a violation is any
/// enabled statistic exceeding its own baseline by more than `1 + theta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StatSet {
    #[default]
    Mean,
    MeanP95,
    MeanP95P99,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TunerConfig {
    /// Allowed end-to-end latency degradation ratio.
    pub theta: f64,
    pub delta_up: f64,
    pub delta_down: f64,
    /// Queries per epoch.
    pub epoch_queries: usize,
    /// Consecutive violating epochs before rebaselining.
    pub violation_limit: usize,
    pub statistics: StatSet,
    pub alpha_floor: f64,
    /// Epochs spent profiling the baseline in Recording.
    pub recording_epochs: usize,
    /// Steady epochs between baseline-refresh suspensions.
    pub refresh_period: usize,
    /// Bisection stops when the interval is this narrow.
    pub alpha_resolution: f64,
    /// Observations below this count are rejected.
    pub min_epoch_samples: usize,
    /// Reservoir size for P95/P99 estimation.
    pub reservoir_capacity: usize,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            theta: 0.05,
            delta_up: 0.02,
            delta_down: 0.02,
            epoch_queries: 200,
            violation_limit: 3,
            statistics: StatSet::Mean,
            alpha_floor: 0.0,
            recording_epochs: 3,
            refresh_period: 50,
            alpha_resolution: 1.0 / 32.0,
            min_epoch_samples: 1,
            reservoir_capacity: 4096,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta >= 0.0) {
            return Err(Error::InvalidConfig("theta must be >= 0".into()));
        }
        if self.violation_limit == 0 {
            return Err(Error::InvalidConfig("violation_limit must be >= 1".into()));
        }
        if self.epoch_queries == 0 || self.recording_epochs == 0 {
            return Err(Error::InvalidConfig(
                "epoch_queries and recording_epochs must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha_floor) {
            return Err(Error::InvalidConfig("alpha_floor must be in [0, 1]".into()));
        }
        if !(self.alpha_resolution > 0.0 && self.alpha_resolution < 1.0) {
            return Err(Error::InvalidConfig("alpha_resolution must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One epoch's latency summary, microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyObservation {
    pub mean_us: f64,
    pub p95_us: Option<f64>,
    pub p99_us: Option<f64>,
    pub count: usize,
    /// Query errors surfaced during the epoch; any error triggers Rebaseline.
    pub errors: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Stats3 {
    mean: f64,
    p95: f64,
    p99: f64,
}

/// One trace row per epoch: phase the epoch ran in, effective utilization
/// during it, and the measured mean-latency ratio against the baseline.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub epoch: u64,
    pub phase: TunerPhase,
    pub alpha: f64,
    pub ratio: Option<f64>,
}

struct EpochAcc {
    count: usize,
    seen: usize,
    sum_us: f64,
    reservoir: Vec<f64>,
    errors: usize,
}

impl EpochAcc {
    fn new() -> Self {
        Self {
            count: 0,
            seen: 0,
            sum_us: 0.0,
            reservoir: Vec::new(),
            errors: 0,
        }
    }
}

struct Inner {
    phase: TunerPhase,
    alpha: f64,
    refreshing: bool,
    disabled: bool,
    baseline: Option<Stats3>,
    recorded: Vec<Stats3>,
    lo: f64,
    hi: f64,
    probe: f64,
    violations: usize,
    steady_since_refresh: usize,
    epoch: u64,
    acc: EpochAcc,
    rng: ChaCha8Rng,
    trace: Vec<TraceRow>,
}

pub struct Tuner {
    cfg: TunerConfig,
    inner: Mutex<Inner>,
    /// Effective utilization for the epoch in progress, published for readers.
    published: AtomicU64,
    /// When set, co-execution stays off regardless of phase (paired-baseline
    /// runs force utilization to zero).
    forced_zero: bool,
}

impl Tuner {
    pub fn new(cfg: TunerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            inner: Mutex::new(Inner {
                phase: TunerPhase::Recording,
                alpha: 0.0,
                refreshing: false,
                disabled: false,
                baseline: None,
                recorded: Vec::new(),
                lo: 0.0,
                hi: 1.0,
                probe: 0.5,
                violations: 0,
                steady_since_refresh: 0,
                epoch: 0,
                acc: EpochAcc::new(),
                rng: ChaCha8Rng::seed_from_u64(0x7u64),
                trace: Vec::new(),
            }),
            published: AtomicU64::new(0f64.to_bits()),
            forced_zero: false,
            cfg,
        })
    }

    /// A tuner that never grants any budget; the paired no-co-execution
    /// baseline uses this.
    pub fn forced_zero(cfg: TunerConfig) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        t.forced_zero = true;
        Ok(t)
    }

    pub fn config(&self) -> &TunerConfig {
        &self.cfg
    }

    /// Utilization ratio in force right now, in [0, 1].
    pub fn effective_alpha(&self) -> f64 {
        if self.forced_zero {
            return 0.0;
        }
        f64::from_bits(self.published.load(Ordering::Acquire))
    }

    /// The per-slice grant: `alpha * tau_est`; zero while Recording, during
    /// baseline refreshes, when disabled, or when forced to zero.
    pub fn effective_budget(&self, tau_est: Duration) -> Duration {
        tau_est.mul_f64(self.effective_alpha())
    }

    pub fn phase(&self) -> TunerPhase {
        self.inner.lock().phase
    }

    pub fn trace(&self) -> Vec<TraceRow> {
        self.inner.lock().trace.clone()
    }

    /// Fold one query latency into the running epoch; seals and steps the
    /// state machine when the epoch fills.
    pub fn observe_query(&self, latency: Duration) {
        let mut inner = self.inner.lock();
        let us = as_micros_f64(latency);
        inner.acc.count += 1;
        inner.acc.seen += 1;
        inner.acc.sum_us += us;
        // Reservoir sampling (Algorithm R) for the tail statistics.
        let cap = self.cfg.reservoir_capacity;
        if inner.acc.reservoir.len() < cap {
            inner.acc.reservoir.push(us);
        } else {
            let seen = inner.acc.seen;
            let j = inner.rng.gen_range(0..seen);
            if j < cap {
                inner.acc.reservoir[j] = us;
            }
        }
        if inner.acc.count >= self.cfg.epoch_queries {
            let obs = seal_epoch(&mut inner.acc);
            self.step_locked(&mut inner, obs);
        }
    }

    /// Record a failed query; surfaces as a Rebaseline trigger.
    pub fn observe_error(&self) {
        self.inner.lock().acc.errors += 1;
    }

    /// Drive the state machine with an externally assembled observation.
    /// Returns the phase entered and the effective utilization for the next
    /// epoch. Rejects under-sampled observations.
    pub fn step(&self, obs: LatencyObservation) -> Result<(TunerPhase, f64)> {
        if obs.count < self.cfg.min_epoch_samples {
            return Err(Error::InvalidConfig(format!(
                "observation has {} samples, need >= {}",
                obs.count, self.cfg.min_epoch_samples
            )));
        }
        let mut inner = self.inner.lock();
        self.step_locked(&mut inner, obs);
        Ok((inner.phase, self.effective_alpha()))
    }

    fn enabled_ratios(&self, obs: &LatencyObservation, base: &Stats3) -> Vec<f64> {
        let mut out = vec![obs.mean_us / base.mean];
        if matches!(self.cfg.statistics, StatSet::MeanP95 | StatSet::MeanP95P99) {
            if let Some(p95) = obs.p95_us {
                if base.p95 > 0.0 {
                    out.push(p95 / base.p95);
                }
            }
        }
        if matches!(self.cfg.statistics, StatSet::MeanP95P99) {
            if let Some(p99) = obs.p99_us {
                if base.p99 > 0.0 {
                    out.push(p99 / base.p99);
                }
            }
        }
        out
    }

    fn step_locked(&self, inner: &mut Inner, obs: LatencyObservation) {
        let bound = 1.0 + self.cfg.theta;
        let ratio = inner.baseline.map(|b| obs.mean_us / b.mean);
        inner.trace.push(TraceRow {
            epoch: inner.epoch,
            phase: inner.phase,
            alpha: self.effective_alpha(),
            ratio,
        });
        inner.epoch += 1;

        // A query failure during adaptation forces a fresh baseline.
        if obs.errors > 0
            && matches!(inner.phase, TunerPhase::Steady | TunerPhase::BinarySearch)
        {
            self.enter_rebaseline(inner);
            self.publish(inner);
            return;
        }

        match inner.phase {
            TunerPhase::Recording => {
                inner.recorded.push(Stats3 {
                    mean: obs.mean_us,
                    p95: obs.p95_us.unwrap_or(0.0),
                    p99: obs.p99_us.unwrap_or(0.0),
                });
                if inner.recorded.len() >= self.cfg.recording_epochs {
                    let n = inner.recorded.len() as f64;
                    let base = Stats3 {
                        mean: inner.recorded.iter().map(|s| s.mean).sum::<f64>() / n,
                        p95: inner.recorded.iter().map(|s| s.p95).sum::<f64>() / n,
                        p99: inner.recorded.iter().map(|s| s.p99).sum::<f64>() / n,
                    };
                    inner.baseline = Some(base);
                    inner.recorded.clear();
                    inner.phase = TunerPhase::BinarySearch;
                    inner.lo = 0.0;
                    inner.hi = 1.0;
                    inner.probe = 0.5;
                    inner.disabled = false;
                }
            }
            TunerPhase::BinarySearch => {
                let base = inner.baseline.expect("baseline set before bisection");
                let feasible = self
                    .enabled_ratios(&obs, &base)
                    .iter()
                    .all(|r| *r <= bound);
                if feasible {
                    inner.lo = inner.probe;
                } else {
                    inner.hi = inner.probe;
                }
                if inner.hi - inner.lo <= self.cfg.alpha_resolution {
                    if inner.lo > 0.0 {
                        inner.alpha = inner.lo;
                    } else {
                        // No feasible utilization even at the bisection floor.
                        inner.disabled = true;
                        inner.alpha = 0.0;
                    }
                    inner.phase = TunerPhase::Steady;
                    inner.violations = 0;
                    inner.steady_since_refresh = 0;
                } else {
                    inner.probe = (inner.lo + inner.hi) / 2.0;
                }
            }
            TunerPhase::Steady => {
                if inner.refreshing {
                    // This epoch ran with co-execution suspended: its stats
                    // become the refreshed baseline.
                    inner.baseline = Some(Stats3 {
                        mean: obs.mean_us,
                        p95: obs.p95_us.unwrap_or(0.0),
                        p99: obs.p99_us.unwrap_or(0.0),
                    });
                    inner.refreshing = false;
                    inner.steady_since_refresh = 0;
                } else if !inner.disabled {
                    let base = inner.baseline.expect("baseline set in steady state");
                    let violation = self
                        .enabled_ratios(&obs, &base)
                        .iter()
                        .any(|r| *r > bound);
                    if violation {
                        inner.alpha = (inner.alpha - self.cfg.delta_down).max(self.cfg.alpha_floor);
                        inner.violations += 1;
                        if inner.violations >= self.cfg.violation_limit {
                            self.enter_rebaseline(inner);
                            self.publish(inner);
                            return;
                        }
                    } else {
                        inner.alpha = (inner.alpha + self.cfg.delta_up).min(1.0);
                        inner.violations = 0;
                    }
                    inner.steady_since_refresh += 1;
                    if inner.steady_since_refresh >= self.cfg.refresh_period {
                        inner.refreshing = true;
                    }
                }
            }
            TunerPhase::Rebaseline => {
                // Transitional: the first observation after entering restarts
                // recording with this epoch already ignored.
                inner.phase = TunerPhase::Recording;
                inner.recorded.clear();
            }
        }
        self.publish(inner);
    }

    fn enter_rebaseline(&self, inner: &mut Inner) {
        inner.phase = TunerPhase::Rebaseline;
        inner.baseline = None;
        inner.recorded.clear();
        inner.violations = 0;
        inner.alpha = 0.0;
        inner.refreshing = false;
        // Next step lands in Recording.
        inner.phase = TunerPhase::Recording;
        inner.trace.push(TraceRow {
            epoch: inner.epoch,
            phase: TunerPhase::Rebaseline,
            alpha: 0.0,
            ratio: None,
        });
    }

    fn publish(&self, inner: &Inner) {
        let effective = match inner.phase {
            TunerPhase::Recording | TunerPhase::Rebaseline => 0.0,
            TunerPhase::BinarySearch => inner.probe,
            TunerPhase::Steady => {
                if inner.disabled || inner.refreshing {
                    0.0
                } else {
                    inner.alpha
                }
            }
        };
        self.published
            .store(effective.to_bits(), Ordering::Release);
    }
}

fn seal_epoch(acc: &mut EpochAcc) -> LatencyObservation {
    let mut reservoir = std::mem::take(&mut acc.reservoir);
    reservoir.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |q: f64| -> Option<f64> {
        if reservoir.is_empty() {
            return None;
        }
        let rank = ((q * reservoir.len() as f64).ceil() as usize).clamp(1, reservoir.len());
        Some(reservoir[rank - 1])
    };
    let obs = LatencyObservation {
        mean_us: if acc.count > 0 {
            acc.sum_us / acc.count as f64
        } else {
            0.0
        },
        p95_us: pct(0.95),
        p99_us: pct(0.99),
        count: acc.count,
        errors: acc.errors,
    };
    *acc = EpochAcc::new();
    obs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(mean: f64) -> LatencyObservation {
        LatencyObservation {
            mean_us: mean,
            p95_us: Some(mean * 1.5),
            p99_us: Some(mean * 2.0),
            count: 100,
            errors: 0,
        }
    }

    fn cfg() -> TunerConfig {
        TunerConfig {
            theta: 0.05,
            recording_epochs: 2,
            refresh_period: 1000,
            ..TunerConfig::default()
        }
    }

    /// Drive recording + bisection with a plant whose degradation is
    /// `gain * alpha`; returns the tuner in Steady.
    fn into_steady(t: &Tuner, base: f64, gain: f64) -> usize {
        let mut epochs = 0;
        loop {
            let alpha = t.effective_alpha();
            let (phase, _) = t.step(obs(base * (1.0 + gain * alpha))).unwrap();
            epochs += 1;
            if phase == TunerPhase::Steady {
                return epochs;
            }
            assert!(epochs < 50, "must reach steady");
        }
    }

    #[test]
    fn recording_suspends_coexecution_then_bisects() {
        let t = Tuner::new(cfg()).unwrap();
        assert_eq!(t.phase(), TunerPhase::Recording);
        assert_eq!(t.effective_alpha(), 0.0);
        t.step(obs(100.0)).unwrap();
        assert_eq!(t.effective_alpha(), 0.0, "suspended during recording");
        let (phase, alpha) = t.step(obs(100.0)).unwrap();
        assert_eq!(phase, TunerPhase::BinarySearch);
        assert_eq!(alpha, 0.5, "first bisection probe");
    }

    #[test]
    fn bisection_terminates_within_log_bound() {
        let t = Tuner::new(cfg()).unwrap();
        t.step(obs(100.0)).unwrap();
        t.step(obs(100.0)).unwrap();
        // ceil(log2(1/alpha_resolution)) = 5 epochs of bisection.
        let mut epochs = 0;
        while t.phase() == TunerPhase::BinarySearch {
            let alpha = t.effective_alpha();
            t.step(obs(100.0 * (1.0 + 0.08 * alpha))).unwrap();
            epochs += 1;
            assert!(epochs <= 5, "bisection exceeded its epoch bound");
        }
        let alpha = t.effective_alpha();
        assert!((0.0..=1.0).contains(&alpha));
        assert!(alpha > 0.0, "feasible alpha exists for a mild plant");
    }

    #[test]
    fn steady_increment_clamps_at_one() {
        let t = Tuner::new(cfg()).unwrap();
        into_steady(&t, 100.0, 0.0);
        for _ in 0..60 {
            t.step(obs(100.0)).unwrap();
        }
        assert_eq!(t.effective_alpha(), 1.0);
    }

    #[test]
    fn three_consecutive_violations_trigger_rebaseline() {
        let t = Tuner::new(cfg()).unwrap();
        into_steady(&t, 100.0, 0.0);
        let a0 = t.effective_alpha();
        // Ratios 1.10, 1.12, 1.09 against baseline 100 with theta 0.05.
        t.step(obs(110.0)).unwrap();
        assert!(t.effective_alpha() < a0, "violation decrements alpha");
        t.step(obs(112.0)).unwrap();
        let (phase, alpha) = t.step(obs(109.0)).unwrap();
        assert_eq!(phase, TunerPhase::Recording, "rebaseline returns to recording");
        assert_eq!(alpha, 0.0);
        let trace = t.trace();
        assert!(trace.iter().any(|r| r.phase == TunerPhase::Rebaseline));
    }

    #[test]
    fn violation_counter_resets_on_compliance() {
        let t = Tuner::new(cfg()).unwrap();
        into_steady(&t, 100.0, 0.0);
        t.step(obs(110.0)).unwrap();
        t.step(obs(110.0)).unwrap();
        t.step(obs(100.0)).unwrap(); // resets the streak
        t.step(obs(110.0)).unwrap();
        t.step(obs(110.0)).unwrap();
        assert_eq!(t.phase(), TunerPhase::Steady, "no rebaseline after a reset");
    }

    #[test]
    fn search_failure_triggers_rebaseline() {
        let t = Tuner::new(cfg()).unwrap();
        into_steady(&t, 100.0, 0.0);
        let mut bad = obs(100.0);
        bad.errors = 1;
        let (phase, _) = t.step(bad).unwrap();
        assert_eq!(phase, TunerPhase::Recording);
    }

    #[test]
    fn infeasible_plant_disables_coexecution() {
        // Degradation 10x at any positive alpha: nothing is feasible.
        let t = Tuner::new(cfg()).unwrap();
        t.step(obs(100.0)).unwrap();
        t.step(obs(100.0)).unwrap();
        while t.phase() == TunerPhase::BinarySearch {
            let alpha = t.effective_alpha();
            let mean = if alpha > 0.0 { 1000.0 } else { 100.0 };
            t.step(obs(mean)).unwrap();
        }
        assert_eq!(t.phase(), TunerPhase::Steady);
        assert_eq!(t.effective_alpha(), 0.0, "co-execution disabled");
        // Disabled state holds.
        for _ in 0..5 {
            t.step(obs(100.0)).unwrap();
            assert_eq!(t.effective_alpha(), 0.0);
        }
    }

    #[test]
    fn baseline_refresh_suspends_one_epoch() {
        let mut c = cfg();
        c.refresh_period = 3;
        let t = Tuner::new(c).unwrap();
        into_steady(&t, 100.0, 0.0);
        t.step(obs(100.0)).unwrap();
        t.step(obs(100.0)).unwrap();
        t.step(obs(100.0)).unwrap();
        assert_eq!(
            t.effective_alpha(),
            0.0,
            "refresh epoch runs with co-execution suspended"
        );
        // The suspended epoch's stats become the new baseline and control resumes.
        let before = t.inner.lock().alpha;
        t.step(obs(120.0)).unwrap();
        assert_eq!(t.inner.lock().baseline.unwrap().mean, 120.0);
        assert!(t.effective_alpha() >= before);
    }

    #[test]
    fn rejects_undersampled_observation() {
        let mut c = cfg();
        c.min_epoch_samples = 50;
        let t = Tuner::new(c).unwrap();
        let mut small = obs(100.0);
        small.count = 10;
        assert!(t.step(small).is_err());
    }

    #[test]
    fn effective_budget_arithmetic() {
        let t = Tuner::new(cfg()).unwrap();
        assert_eq!(t.effective_budget(Duration::from_micros(200)), Duration::ZERO);
        {
            let mut inner = t.inner.lock();
            inner.phase = TunerPhase::Steady;
            inner.alpha = 1.0;
            t.publish(&inner);
        }
        assert_eq!(
            t.effective_budget(Duration::from_micros(200)),
            Duration::from_micros(200)
        );
        {
            let mut inner = t.inner.lock();
            inner.alpha = 0.595;
            t.publish(&inner);
        }
        let got = t.effective_budget(Duration::from_micros(200));
        let diff = got.abs_diff(Duration::from_micros(119));
        assert!(diff <= Duration::from_nanos(1), "got {got:?}");
    }

    #[test]
    fn forced_zero_never_grants_budget() {
        let t = Tuner::forced_zero(cfg()).unwrap();
        into_steady(&t, 100.0, 0.0);
        for _ in 0..20 {
            t.step(obs(100.0)).unwrap();
        }
        assert_eq!(t.effective_alpha(), 0.0);
        assert_eq!(t.effective_budget(Duration::from_micros(500)), Duration::ZERO);
    }

    #[test]
    fn observe_query_epochs_and_percentiles() {
        let mut c = cfg();
        c.epoch_queries = 100;
        let t = Tuner::new(c).unwrap();
        // One sample: mean equals it (epoch not sealed yet).
        t.observe_query(Duration::from_micros(500));
        assert_eq!(t.inner.lock().acc.sum_us, 500.0);
        // 99 more identical samples seal the epoch; P95 equals the value.
        for _ in 0..99 {
            t.observe_query(Duration::from_micros(500));
        }
        let trace = t.trace();
        assert_eq!(trace.len(), 1);
        let recorded = &t.inner.lock().recorded;
        assert_eq!(recorded.len(), 1);
        assert_eq!(recorded[0].mean, 500.0);
        assert_eq!(recorded[0].p95, 500.0);
    }

    #[test]
    fn reservoir_p95_close_to_exact_on_lognormal() {
        let mut c = cfg();
        c.epoch_queries = 10_000;
        let t = Tuner::new(c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut all = Vec::with_capacity(10_000);
        for _ in 0..10_000 {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            let us = (5.0 + 0.25 * z).exp();
            all.push(us);
            t.observe_query(Duration::from_secs_f64(us / 1e6));
        }
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let exact_p95 = all[(0.95f64 * 10_000.0).ceil() as usize - 1];
        let recorded = &t.inner.lock().recorded;
        assert_eq!(recorded.len(), 1);
        let est = recorded[0].p95;
        let rel = (est - exact_p95).abs() / exact_p95;
        assert!(rel <= 0.02, "reservoir P95 {est} vs exact {exact_p95} ({rel})");
    }

    #[test]
    fn closed_loop_plant_settles_near_target() {
        // Plant: degradation = 0.1 * alpha plus 2% multiplicative noise.
        let t = Tuner::new(TunerConfig {
            theta: 0.05,
            recording_epochs: 3,
            refresh_period: 50,
            ..TunerConfig::default()
        })
        .unwrap();
        let base = 100.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ratios = Vec::new();
        let mut alphas = Vec::new();
        let mut steady_at = None;
        for epoch in 0..200 {
            let alpha = t.effective_alpha();
            let noise = 1.0 + 0.02 * (rng.gen_range(0.0f64..1.0) * 2.0 - 1.0);
            let mean = base * (1.0 + 0.1 * alpha) * noise;
            ratios.push(mean / base);
            alphas.push(alpha);
            t.step(obs(mean)).unwrap();
            if steady_at.is_none() && t.phase() == TunerPhase::Steady {
                steady_at = Some(epoch + 1);
            }
        }
        let steady_at = steady_at.expect("reached steady");
        assert!(steady_at <= 40, "steady after {steady_at} epochs");
        let trailing = &ratios[100..];
        let mean_ratio: f64 = trailing.iter().sum::<f64>() / trailing.len() as f64;
        assert!(
            (1.0..=1.06).contains(&mean_ratio),
            "trailing mean ratio {mean_ratio}"
        );
        // The controller hovers around the feasible point 0.5.
        let tail_alpha: f64 = alphas[100..].iter().sum::<f64>() / 100.0;
        assert!((0.3..=0.7).contains(&tail_alpha), "alpha settled at {tail_alpha}");
    }
}
