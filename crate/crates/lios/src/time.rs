//! Execution environments: wall-clock threads and deterministic virtual time.
//!
//! Latency-sensitive code is written against [`ThreadEnv`] so the same search,
//! budgeting and update paths run either on real threads with the monotonic
//! clock, or on the [`VirtualExecutor`], which multiplexes logical threads over
//! OS threads with per-thread virtual clocks. The virtual executor admits
//! exactly one logical thread at a time and always the one with the smallest
//! `(clock, thread id)` pair, so every interaction with shared state happens in
//! a reproducible order: identical inputs give identical runs.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, Thread};
use std::time::{Duration, Instant};

use parking_lot::Mutex;

/// Per-thread time context. `charge` accounts CPU work against the thread's
/// clock (a no-op on wall clocks, where work takes real time), `checkpoint`
/// marks an ordering point before shared-state interactions, and `sleep_until`
/// advances the thread to a deadline (a device completion time).
pub trait ThreadEnv: Send + Sync {
    fn now(&self) -> Duration;
    fn charge(&self, work: Duration);
    fn checkpoint(&self);
    fn sleep_until(&self, deadline: Duration);
    fn is_virtual(&self) -> bool;
}

/// Wall-clock environment anchored at its creation instant.
#[derive(Clone)]
pub struct WallEnv {
    origin: Instant,
}

impl WallEnv {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Default for WallEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl ThreadEnv for WallEnv {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn charge(&self, _work: Duration) {}

    fn checkpoint(&self) {}

    fn sleep_until(&self, deadline: Duration) {
        let now = self.now();
        if deadline > now {
            thread::sleep(deadline - now);
        }
    }

    fn is_virtual(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum WorkerStatus {
    Waiting,
    Done,
}

struct ExecState {
    clocks: Vec<u64>, // nanoseconds
    status: Vec<WorkerStatus>,
    handles: Vec<Option<Thread>>,
    floor: Option<usize>,
}

impl ExecState {
    /// Earliest non-done worker by `(clock, tid)`.
    fn earliest(&self) -> Option<usize> {
        self.status
            .iter()
            .enumerate()
            .filter(|(_, s)| **s != WorkerStatus::Done)
            .min_by_key(|(tid, _)| (self.clocks[*tid], *tid))
            .map(|(tid, _)| tid)
    }
}

/// Deterministic cooperative scheduler over logical threads.
///
/// Each worker runs on its own OS thread but holds the "floor" exclusively
/// between checkpoints; the floor always passes to the worker with the
/// smallest virtual clock. Workers advance their clocks via `charge` and
/// `sleep_until`; real elapsed time is irrelevant.
pub struct VirtualExecutor {
    state: Mutex<ExecState>,
    panicked: AtomicBool,
}

impl VirtualExecutor {
    fn new(n: usize) -> Arc<Self> {
        Arc::new(Self {
            state: Mutex::new(ExecState {
                clocks: vec![0; n],
                status: vec![WorkerStatus::Waiting; n],
                handles: vec![None; n],
                floor: None,
            }),
            panicked: AtomicBool::new(false),
        })
    }

    /// Run all workers to completion, deterministically interleaved.
    /// Panics from workers are re-raised after every worker has stopped.
    pub fn run(workers: Vec<Box<dyn FnOnce(&VirtualThread) + Send>>) {
        let n = workers.len();
        if n == 0 {
            return;
        }
        let exec = Self::new(n);
        let mut joins = Vec::with_capacity(n);
        for (tid, work) in workers.into_iter().enumerate() {
            let exec = Arc::clone(&exec);
            joins.push(thread::spawn(move || {
                {
                    let mut st = exec.state.lock();
                    st.handles[tid] = Some(thread::current());
                }
                exec.wait_for_floor(tid);
                let env = VirtualThread {
                    exec: Arc::clone(&exec),
                    tid,
                };
                let result =
                    std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| work(&env)));
                if result.is_err() {
                    env.exec.panicked.store(true, Ordering::SeqCst);
                }
                exec.finish(tid);
                if let Err(payload) = result {
                    std::panic::resume_unwind(payload);
                }
            }));
        }
        // Grant the floor to the earliest worker to start the rotation.
        {
            let mut st = exec.state.lock();
            let first = st.earliest().expect("workers exist");
            st.floor = Some(first);
            if let Some(h) = &st.handles[first] {
                h.unpark();
            }
        }
        let mut panic_payload = None;
        for j in joins {
            if let Err(p) = j.join() {
                panic_payload.get_or_insert(p);
            }
        }
        if let Some(p) = panic_payload {
            std::panic::resume_unwind(p);
        }
    }

    fn wait_for_floor(&self, tid: usize) {
        loop {
            {
                let st = self.state.lock();
                if st.floor == Some(tid) {
                    return;
                }
            }
            thread::park();
        }
    }

    fn pass_floor(&self, tid: usize) {
        let next = {
            let mut st = self.state.lock();
            let next = st.earliest();
            if next == Some(tid) {
                return; // still earliest, keep running
            }
            st.floor = next;
            next.and_then(|t| st.handles[t].clone())
        };
        if let Some(h) = next {
            h.unpark();
        }
        self.wait_for_floor(tid);
    }

    fn finish(&self, tid: usize) {
        let next = {
            let mut st = self.state.lock();
            st.status[tid] = WorkerStatus::Done;
            let next = st.earliest();
            st.floor = next;
            next.and_then(|t| st.handles[t].clone())
        };
        if let Some(h) = next {
            h.unpark();
        }
    }
}

/// Handle a worker uses to interact with its [`VirtualExecutor`].
#[derive(Clone)]
pub struct VirtualThread {
    exec: Arc<VirtualExecutor>,
    tid: usize,
}

impl VirtualThread {
    pub fn thread_id(&self) -> usize {
        self.tid
    }
}

impl ThreadEnv for VirtualThread {
    fn now(&self) -> Duration {
        let st = self.exec.state.lock();
        Duration::from_nanos(st.clocks[self.tid])
    }

    fn charge(&self, work: Duration) {
        let mut st = self.exec.state.lock();
        st.clocks[self.tid] += work.as_nanos() as u64;
    }

    fn checkpoint(&self) {
        self.exec.pass_floor(self.tid);
    }

    fn sleep_until(&self, deadline: Duration) {
        {
            let mut st = self.exec.state.lock();
            let d = deadline.as_nanos() as u64;
            if d > st.clocks[self.tid] {
                st.clocks[self.tid] = d;
            }
        }
        self.exec.pass_floor(self.tid);
    }

    fn is_virtual(&self) -> bool {
        true
    }
}

/// Inert environment for code paths where time is irrelevant (index build,
/// synchronous oracles): the clock stays at zero and charges are dropped.
pub struct NullEnv;

impl ThreadEnv for NullEnv {
    fn now(&self) -> Duration {
        Duration::ZERO
    }

    fn charge(&self, _work: Duration) {}

    fn checkpoint(&self) {}

    fn sleep_until(&self, _deadline: Duration) {}

    fn is_virtual(&self) -> bool {
        false
    }
}

/// Virtual CPU cost model: how much simulated time each unit of work charges
/// against the executing thread's clock. Wall-clock runs ignore it (real time
/// passes instead). Microsecond-scale defaults give per-hop search compute
/// well below typical simulated I/O latency and per-vector update compute
/// spanning many idle windows, so budgets and slicing actually matter.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CpuCostModel {
    /// Per approximate (compressed) distance evaluation, microseconds.
    pub approx_dist_us: f64,
    /// Per exact distance evaluation, microseconds.
    pub exact_dist_us: f64,
    /// Fixed per search hop (decode, pool maintenance, re-rank share).
    pub search_hop_us: f64,
    /// Fixed per insert-search hop inside update tasks.
    pub update_hop_us: f64,
    /// Per resumable-prune inner-loop iteration.
    pub prune_iter_us: f64,
    /// Per record visited by the delete scan.
    pub scan_record_us: f64,
    /// Per slice dispatch (dequeue, bookkeeping).
    pub slice_overhead_us: f64,
}

impl Default for CpuCostModel {
    fn default() -> Self {
        Self {
            approx_dist_us: 0.1,
            exact_dist_us: 0.1,
            search_hop_us: 20.0,
            update_hop_us: 2.0,
            prune_iter_us: 1.0,
            scan_record_us: 0.2,
            slice_overhead_us: 0.5,
        }
    }
}

impl CpuCostModel {
    pub fn approx_dist(&self, n: usize) -> Duration {
        from_micros_f64(self.approx_dist_us * n as f64)
    }

    pub fn exact_dist(&self, n: usize) -> Duration {
        from_micros_f64(self.exact_dist_us * n as f64)
    }

    pub fn search_hop(&self) -> Duration {
        from_micros_f64(self.search_hop_us)
    }

    pub fn update_hop(&self) -> Duration {
        from_micros_f64(self.update_hop_us)
    }

    pub fn prune_iter(&self) -> Duration {
        from_micros_f64(self.prune_iter_us)
    }

    pub fn scan_record(&self, n: usize) -> Duration {
        from_micros_f64(self.scan_record_us * n as f64)
    }

    pub fn slice_overhead(&self) -> Duration {
        from_micros_f64(self.slice_overhead_us)
    }
}

/// Manually advanced clock for driving the simulated device in tests: time
/// moves only through [`ManualClock::advance_virtual_time`] (or explicit
/// charges), making due completions visible step by step.
#[derive(Default)]
pub struct ManualClock {
    now_ns: std::sync::atomic::AtomicU64,
}

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance_virtual_time(&self, d: Duration) {
        self.now_ns
            .fetch_add(d.as_nanos() as u64, Ordering::SeqCst);
    }
}

impl ThreadEnv for ManualClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.now_ns.load(Ordering::SeqCst))
    }

    fn charge(&self, work: Duration) {
        self.advance_virtual_time(work);
    }

    fn checkpoint(&self) {}

    fn sleep_until(&self, deadline: Duration) {
        let d = deadline.as_nanos() as u64;
        self.now_ns.fetch_max(d, Ordering::SeqCst);
    }

    fn is_virtual(&self) -> bool {
        true
    }
}

/// Duration in fractional microseconds.
#[inline]
pub fn as_micros_f64(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

/// Duration from fractional microseconds, clamped below at zero.
#[inline]
pub fn from_micros_f64(us: f64) -> Duration {
    if us <= 0.0 {
        Duration::ZERO
    } else {
        Duration::from_secs_f64(us / 1e6)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex as StdMutex;

    #[test]
    fn wall_env_advances() {
        let env = WallEnv::new();
        let a = env.now();
        std::thread::sleep(Duration::from_millis(2));
        assert!(env.now() > a);
    }

    #[test]
    fn virtual_interleaving_is_time_ordered() {
        // Two workers record the order of their checkpoints; the one with the
        // smaller clock must always act first.
        let log = Arc::new(StdMutex::new(Vec::new()));
        let l0 = Arc::clone(&log);
        let l1 = Arc::clone(&log);
        let workers: Vec<Box<dyn FnOnce(&VirtualThread) + Send>> = vec![
            Box::new(move |env| {
                for i in 0..3 {
                    env.charge(Duration::from_micros(10));
                    env.checkpoint();
                    l0.lock().unwrap().push((0usize, i, env.now()));
                }
            }),
            Box::new(move |env| {
                for i in 0..3 {
                    env.charge(Duration::from_micros(7));
                    env.checkpoint();
                    l1.lock().unwrap().push((1usize, i, env.now()));
                }
            }),
        ];
        VirtualExecutor::run(workers);
        let log = log.lock().unwrap();
        assert_eq!(log.len(), 6);
        // Events must be ordered by (time, tid).
        let mut sorted = log.clone();
        sorted.sort_by_key(|&(tid, _, t)| (t, tid));
        assert_eq!(*log, sorted);
    }

    #[test]
    fn virtual_run_is_deterministic() {
        fn run_once() -> Vec<(usize, u128)> {
            let log = Arc::new(StdMutex::new(Vec::new()));
            let workers: Vec<Box<dyn FnOnce(&VirtualThread) + Send>> = (0..4)
                .map(|tid| {
                    let log = Arc::clone(&log);
                    Box::new(move |env: &VirtualThread| {
                        for step in 0..20u64 {
                            env.charge(Duration::from_nanos(100 + (tid as u64 * 37 + step) % 91));
                            env.checkpoint();
                            log.lock().unwrap().push((tid, env.now().as_nanos()));
                        }
                    }) as Box<dyn FnOnce(&VirtualThread) + Send>
                })
                .collect();
            VirtualExecutor::run(workers);
            Arc::try_unwrap(log).unwrap().into_inner().unwrap()
        }
        assert_eq!(run_once(), run_once());
    }

    #[test]
    fn sleep_until_jumps_clock() {
        let workers: Vec<Box<dyn FnOnce(&VirtualThread) + Send>> = vec![Box::new(|env| {
            env.sleep_until(Duration::from_micros(500));
            assert_eq!(env.now(), Duration::from_micros(500));
            // Sleeping into the past does not move the clock backwards.
            env.sleep_until(Duration::from_micros(100));
            assert_eq!(env.now(), Duration::from_micros(500));
        })];
        VirtualExecutor::run(workers);
    }

    #[test]
    fn micros_conversions() {
        assert_eq!(as_micros_f64(Duration::from_micros(250)), 250.0);
        assert_eq!(from_micros_f64(250.0), Duration::from_micros(250));
        assert_eq!(from_micros_f64(-1.0), Duration::ZERO);
    }
}
