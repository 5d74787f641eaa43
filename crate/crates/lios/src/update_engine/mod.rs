//! Update decomposition and time-budgeted execution.
//!
//! Inserts and deletes decompose into per-vector repair tasks over a shared
//! FIFO queue: an insert runs its own candidate search and prune, then repairs
//! the reverse neighborhood one vector at a time (self-re-enqueueing between
//! vectors); a delete tombstones its ids immediately, then a sliceable
//! graph-wide scan emits one repair task per affected node. Candidate pools
//! are frozen when a task is created, so any consumption order over the fixed
//! pools converges to the same graph — which is what the synchronous-apply
//! oracle in [`apply_synchronously`] checks.
//!
//! Slices run inside search-side stall windows via [`CoexecHook`]: lightweight
//! phases (candidate prep, distance computation, list finalization) run to
//! completion within a slice, prune phases go through the resumable prune and
//! yield mid-scan when the granted budget expires.

use std::collections::{HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam::queue::SegQueue;
use parking_lot::Mutex;

use crate::budgeting::{BudgetMode, BudgetTable, IdleSample};
use crate::error::{Error, Result};
use crate::graph_index::{l2_distance, Index, VectorId};
use crate::prune::{
    prune_monolithic, prune_slice, Candidate, EnvPruneClock, PruneTaskState, SliceOutcome,
};
use crate::search::{expand_candidates, MemSearcher, StallHook};
use crate::time::{CpuCostModel, ThreadEnv};
use crate::tuner::Tuner;

/// A logical index mutation.
#[derive(Debug, Clone, PartialEq)]
pub enum UpdateOp {
    Insert(Vec<f32>),
    Delete(Vec<VectorId>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OpId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Insert,
    Delete,
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OpKind::Insert => "insert",
            OpKind::Delete => "delete",
        })
    }
}

/// Completion-log entry for one submitted op.
#[derive(Debug, Clone)]
pub struct OpRecord {
    pub id: OpId,
    pub kind: OpKind,
    /// Vectors touched: 1 for an insert, the id count for a delete.
    pub vectors: usize,
    pub enqueued_at: Duration,
    pub drained_at: Option<Duration>,
    pub failed: bool,
}

struct OpTracker {
    id: OpId,
    remaining: AtomicUsize,
    failed: AtomicBool,
    /// Tombstoned ids returned to the free list when the op drains.
    reclaim: Vec<VectorId>,
}

/// Outcome of one `run_slice` call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceRun {
    /// A task was dequeued and executed (possibly partially).
    pub ran: bool,
    /// The dequeued task finished (rather than re-entering the queue).
    pub completed: bool,
}

// ----- task states -----

struct InsertSelfState {
    id: VectorId,
    vector: Vec<f32>,
    search: Option<MemSearcher>,
    prune: Option<PruneTaskState>,
}

enum RepairMode {
    /// The subject had room when the task was created; append on execution
    /// (re-checked: a concurrently filled list falls back to a prune).
    Append,
    Prune(PruneTaskState),
}

struct RepairUnit {
    subject: VectorId,
    mode: RepairMode,
}

struct ReverseRepairState {
    /// The id the repairs attach back-edges to.
    new_id: VectorId,
    pending: VecDeque<RepairUnit>,
    current: Option<RepairUnit>,
}

struct DeleteScanState {
    deleted: Arc<HashSet<VectorId>>,
    cursor: u32,
    end: u32,
}

struct DeleteRepairState {
    subject: VectorId,
    prune: PruneTaskState,
}

enum TaskKind {
    InsertSelf(InsertSelfState),
    InsertReverseRepair(ReverseRepairState),
    DeleteScan(DeleteScanState),
    DeleteRepair(DeleteRepairState),
}

struct UpdateTask {
    kind: TaskKind,
    origin: Arc<OpTracker>,
}

/// Multi-producer / multi-consumer FIFO. A popped task is exclusively owned
/// until completion or re-enqueue; yielded tasks re-enter at the tail.
struct TaskQueue {
    q: SegQueue<UpdateTask>,
    alive: AtomicUsize,
    enqueued: AtomicU64,
    completed: AtomicU64,
}

impl TaskQueue {
    fn new() -> Self {
        Self {
            q: SegQueue::new(),
            alive: AtomicUsize::new(0),
            enqueued: AtomicU64::new(0),
            completed: AtomicU64::new(0),
        }
    }

    fn enqueue_new(&self, task: UpdateTask) {
        self.alive.fetch_add(1, Ordering::AcqRel);
        self.enqueued.fetch_add(1, Ordering::AcqRel);
        self.q.push(task);
    }

    fn requeue(&self, task: UpdateTask) {
        self.q.push(task);
    }

    fn pop(&self) -> Option<UpdateTask> {
        self.q.pop()
    }

    fn complete_one(&self) {
        self.alive.fetch_sub(1, Ordering::AcqRel);
        self.completed.fetch_add(1, Ordering::AcqRel);
    }

    fn pending(&self) -> usize {
        self.alive.load(Ordering::Acquire)
    }
}

enum StepResult {
    Done,
    Again(TaskKind),
}

/// Decomposes update ops into tasks and executes them in budgeted slices.
pub struct UpdateEngine {
    index: Arc<Index>,
    queue: TaskQueue,
    costs: CpuCostModel,
    insert_beam_width: usize,
    ops: Mutex<Vec<OpRecord>>,
    next_op: AtomicU64,
    failed_ops: AtomicUsize,
}

impl UpdateEngine {
    pub fn new(index: Arc<Index>, costs: CpuCostModel) -> Self {
        Self {
            index,
            queue: TaskQueue::new(),
            costs,
            insert_beam_width: 4,
            ops: Mutex::new(Vec::new()),
            next_op: AtomicU64::new(0),
            failed_ops: AtomicUsize::new(0),
        }
    }

    pub fn index(&self) -> &Arc<Index> {
        &self.index
    }

    /// Queued tasks plus in-flight slices; zero means fully drained.
    pub fn pending_count(&self) -> usize {
        self.queue.pending()
    }

    pub fn tasks_enqueued(&self) -> u64 {
        self.queue.enqueued.load(Ordering::Acquire)
    }

    pub fn tasks_completed(&self) -> u64 {
        self.queue.completed.load(Ordering::Acquire)
    }

    pub fn failed_ops(&self) -> usize {
        self.failed_ops.load(Ordering::Acquire)
    }

    pub fn op_log(&self) -> Vec<OpRecord> {
        self.ops.lock().clone()
    }

    pub fn all_ops_complete(&self) -> bool {
        self.ops.lock().iter().all(|op| op.drained_at.is_some())
    }

    pub fn submit(&self, op: UpdateOp, env: &dyn ThreadEnv) -> Result<OpId> {
        match op {
            UpdateOp::Insert(v) => self.submit_insert(v, env),
            UpdateOp::Delete(ids) => self.submit_delete(&ids, env),
        }
    }

    /// Decompose an insert: one self task (search, prune, link) which, on
    /// completion, spawns the reverse-neighborhood repair task.
    pub fn submit_insert(&self, vector: Vec<f32>, env: &dyn ThreadEnv) -> Result<OpId> {
        let id = self.index.allocate_staged(&vector)?;
        let op_id = self.new_op(OpKind::Insert, 1, env);
        let tracker = Arc::new(OpTracker {
            id: op_id,
            remaining: AtomicUsize::new(1),
            failed: AtomicBool::new(false),
            reclaim: Vec::new(),
        });
        self.queue.enqueue_new(UpdateTask {
            kind: TaskKind::InsertSelf(InsertSelfState {
                id,
                vector,
                search: None,
                prune: None,
            }),
            origin: tracker,
        });
        Ok(op_id)
    }

    /// Decompose a delete batch: ids are tombstoned immediately (searches skip
    /// them in results) and a sliceable graph scan emits one repair task per
    /// node whose neighbor list references a deleted id.
    pub fn submit_delete(&self, ids: &[VectorId], env: &dyn ThreadEnv) -> Result<OpId> {
        if ids.is_empty() {
            return Err(Error::InvalidConfig("empty delete set".into()));
        }
        let mut set = HashSet::with_capacity(ids.len());
        for &id in ids {
            if !self.index.is_live(id) {
                return Err(if self.index.is_tombstoned(id) {
                    Error::NotLive(id)
                } else {
                    Error::UnknownId(id)
                });
            }
            if !set.insert(id) {
                return Err(Error::InvalidConfig(format!("duplicate delete id {id}")));
            }
        }
        self.move_entry_point_off(&set)?;
        self.index.tombstone(ids)?;
        let op_id = self.new_op(OpKind::Delete, ids.len(), env);
        let tracker = Arc::new(OpTracker {
            id: op_id,
            remaining: AtomicUsize::new(1),
            failed: AtomicBool::new(false),
            reclaim: ids.to_vec(),
        });
        let end = self.index.allocated();
        self.queue.enqueue_new(UpdateTask {
            kind: TaskKind::DeleteScan(DeleteScanState {
                deleted: Arc::new(set),
                cursor: 0,
                end,
            }),
            origin: tracker,
        });
        Ok(op_id)
    }

    /// If the entry point is being deleted, move it to the nearest live
    /// neighbor outside the delete set (ties to the lower id), falling back to
    /// the lowest surviving live id.
    fn move_entry_point_off(&self, deleted: &HashSet<VectorId>) -> Result<()> {
        let entry = self.index.entry_point();
        if !deleted.contains(&entry) {
            return Ok(());
        }
        let record = self.index.read_node(entry)?;
        let mut best: Option<(f32, VectorId)> = None;
        for nb in &record.neighbors {
            if deleted.contains(nb) || !self.index.is_live(*nb) {
                continue;
            }
            let d = l2_distance(&record.vector, &self.index.vector(*nb)?);
            if best.map_or(true, |(bd, bid)| (d, *nb) < (bd, bid)) {
                best = Some((d, *nb));
            }
        }
        let next = best.map(|(_, id)| id).or_else(|| {
            (0..self.index.allocated())
                .map(VectorId)
                .find(|id| self.index.is_live(*id) && !deleted.contains(id))
        });
        if let Some(id) = next {
            self.index.set_entry_point(id);
        }
        Ok(())
    }

    fn new_op(&self, kind: OpKind, vectors: usize, env: &dyn ThreadEnv) -> OpId {
        let id = OpId(self.next_op.fetch_add(1, Ordering::AcqRel));
        self.ops.lock().push(OpRecord {
            id,
            kind,
            vectors,
            enqueued_at: env.now(),
            drained_at: None,
            failed: false,
        });
        id
    }

    /// Execute at most one task for at most `budget`. Non-prune phases run to
    /// completion inside the slice; prune (and scan) phases yield with their
    /// progress saved when the budget expires, re-entering the queue at the
    /// tail. After finishing one vector of a multi-vector task, the slice ends
    /// and the executing thread re-enqueues the remainder.
    pub fn run_slice(&self, budget: Duration, env: &dyn ThreadEnv) -> SliceRun {
        if budget.is_zero() {
            return SliceRun {
                ran: false,
                completed: false,
            };
        }
        env.checkpoint();
        let Some(task) = self.queue.pop() else {
            return SliceRun {
                ran: false,
                completed: false,
            };
        };
        env.charge(self.costs.slice_overhead());
        let slice_start = env.now();
        let origin = Arc::clone(&task.origin);
        let step = self.execute(task.kind, &origin, slice_start, budget, env);
        match step {
            Ok(StepResult::Done) => {
                self.finish_task(origin, env);
                SliceRun {
                    ran: true,
                    completed: true,
                }
            }
            Ok(StepResult::Again(kind)) => {
                env.checkpoint();
                self.queue.requeue(UpdateTask {
                    kind,
                    origin,
                });
                SliceRun {
                    ran: true,
                    completed: false,
                }
            }
            Err(_) => {
                // Task execution errors mark the origin op failed; the task is
                // dropped so the op can drain and surface in metrics.
                origin.failed.store(true, Ordering::Release);
                self.finish_task(origin, env);
                SliceRun {
                    ran: true,
                    completed: true,
                }
            }
        }
    }

    fn finish_task(&self, origin: Arc<OpTracker>, env: &dyn ThreadEnv) {
        self.queue.complete_one();
        if origin.remaining.fetch_sub(1, Ordering::AcqRel) == 1 {
            // Last task of the op: reclaim delete slots, close the log entry.
            if !origin.reclaim.is_empty() {
                self.index.reclaim(&origin.reclaim);
            }
            let failed = origin.failed.load(Ordering::Acquire);
            if failed {
                self.failed_ops.fetch_add(1, Ordering::AcqRel);
            }
            let mut ops = self.ops.lock();
            if let Some(rec) = ops.iter_mut().find(|r| r.id == origin.id) {
                rec.drained_at = Some(env.now());
                rec.failed = failed;
            }
        }
    }

    /// Run slices with an unbounded budget until the queue drains.
    pub fn drain(&self, env: &dyn ThreadEnv) {
        while self.pending_count() > 0 {
            self.run_slice(Duration::MAX, env);
        }
    }

    fn remaining(&self, slice_start: Duration, budget: Duration, env: &dyn ThreadEnv) -> Duration {
        let elapsed = env.now().saturating_sub(slice_start);
        budget.saturating_sub(elapsed)
    }

    fn execute(
        &self,
        kind: TaskKind,
        origin: &Arc<OpTracker>,
        slice_start: Duration,
        budget: Duration,
        env: &dyn ThreadEnv,
    ) -> Result<StepResult> {
        match kind {
            TaskKind::InsertSelf(state) => {
                self.run_insert_self(state, origin, slice_start, budget, env)
            }
            TaskKind::InsertReverseRepair(state) => {
                self.run_reverse_repair(state, slice_start, budget, env)
            }
            TaskKind::DeleteScan(state) => {
                self.run_delete_scan(state, origin, slice_start, budget, env)
            }
            TaskKind::DeleteRepair(state) => {
                self.run_delete_repair(state, slice_start, budget, env)
            }
        }
    }

    fn run_insert_self(
        &self,
        mut state: InsertSelfState,
        origin: &Arc<OpTracker>,
        slice_start: Duration,
        budget: Duration,
        env: &dyn ThreadEnv,
    ) -> Result<StepResult> {
        // First vector of an empty index: link nothing, become the entry.
        if state.search.is_none() && state.prune.is_none() && self.index.live_count() == 0 {
            self.index.mark_live(state.id);
            self.index.set_entry_point(state.id);
            return Ok(StepResult::Done);
        }

        // Candidate search, yielding between hops when the budget expires.
        if state.prune.is_none() {
            if state.search.is_none() {
                state.search = Some(MemSearcher::new(
                    &self.index,
                    state.vector.clone(),
                    self.index.config().l_build,
                    self.insert_beam_width,
                )?);
            }
            let searcher = state.search.as_mut().expect("search state present");
            loop {
                if !searcher.step_hop(&self.index, env, &self.costs)? {
                    break;
                }
                if self.remaining(slice_start, budget, env).is_zero() {
                    return Ok(StepResult::Again(TaskKind::InsertSelf(state)));
                }
            }
            let searcher = state.search.take().expect("search finished");
            let entries: Vec<(Candidate, Vec<f32>)> = searcher
                .into_candidates(&self.index)
                .into_iter()
                .filter(|c| c.id != state.id)
                .map(|c| {
                    (
                        Candidate {
                            id: c.id,
                            dist_to_target: c.distance,
                        },
                        c.vector,
                    )
                })
                .collect();
            state.prune = Some(PruneTaskState::new(
                state.vector.clone(),
                entries,
                self.index.config().alpha_prune,
                self.index.r(),
            )?);
        }

        // Resumable prune over the frozen pool.
        let prune_state = state.prune.as_mut().expect("prune state present");
        let grant = self.remaining(slice_start, budget, env).max(Duration::from_nanos(1));
        let mut clock = EnvPruneClock::start(env, self.costs.prune_iter());
        let selected = match prune_slice(prune_state, grant, &mut clock)? {
            SliceOutcome::Yielded(_) => {
                return Ok(StepResult::Again(TaskKind::InsertSelf(state)));
            }
            SliceOutcome::Completed(ids) => ids,
        };

        // Finalization: link the new node, go live, freeze reverse repairs.
        self.index.update_node(state.id, |rec| {
            rec.neighbors = selected.clone();
            true
        })?;
        self.index.mark_live(state.id);
        if !self.index.is_live(self.index.entry_point()) {
            self.index.set_entry_point(state.id);
        }
        let mut pending = VecDeque::with_capacity(selected.len());
        for &nb in &selected {
            if let Some(unit) = self.freeze_reverse_repair(nb, state.id, env)? {
                pending.push_back(unit);
            }
        }
        if !pending.is_empty() {
            origin.remaining.fetch_add(1, Ordering::AcqRel);
            self.queue.enqueue_new(UpdateTask {
                kind: TaskKind::InsertReverseRepair(ReverseRepairState {
                    new_id: state.id,
                    pending,
                    current: None,
                }),
                origin: Arc::clone(origin),
            });
        }
        Ok(StepResult::Done)
    }

    /// Snapshot the repair for one reverse neighbor: a plain append when the
    /// list has room, otherwise a prune over the frozen pool (current live
    /// neighbors plus the new id).
    fn freeze_reverse_repair(
        &self,
        subject: VectorId,
        new_id: VectorId,
        env: &dyn ThreadEnv,
    ) -> Result<Option<RepairUnit>> {
        let record = self.index.read_node(subject)?;
        if record.neighbors.contains(&new_id) {
            return Ok(None);
        }
        if record.neighbors.len() < self.index.r() {
            return Ok(Some(RepairUnit {
                subject,
                mode: RepairMode::Append,
            }));
        }
        let prune = self.build_overflow_prune(subject, &record.vector, &record.neighbors, new_id, env)?;
        Ok(Some(RepairUnit {
            subject,
            mode: RepairMode::Prune(prune),
        }))
    }

    fn build_overflow_prune(
        &self,
        subject: VectorId,
        subject_vector: &[f32],
        neighbors: &[VectorId],
        new_id: VectorId,
        env: &dyn ThreadEnv,
    ) -> Result<PruneTaskState> {
        let mut entries = Vec::with_capacity(neighbors.len() + 1);
        let mut dists = 0usize;
        for &nb in neighbors.iter().chain(std::iter::once(&new_id)) {
            if nb == subject || self.index.is_tombstoned(nb) {
                continue;
            }
            let vec = self.index.vector(nb)?;
            dists += 1;
            entries.push((
                Candidate {
                    id: nb,
                    dist_to_target: l2_distance(subject_vector, &vec),
                },
                vec,
            ));
        }
        env.charge(self.costs.exact_dist(dists));
        PruneTaskState::new(
            subject_vector.to_vec(),
            entries,
            self.index.config().alpha_prune,
            self.index.r(),
        )
    }

    fn run_reverse_repair(
        &self,
        mut state: ReverseRepairState,
        slice_start: Duration,
        budget: Duration,
        env: &dyn ThreadEnv,
    ) -> Result<StepResult> {
        let unit = match state.current.take().or_else(|| state.pending.pop_front()) {
            Some(u) => u,
            None => return Ok(StepResult::Done),
        };
        let subject = unit.subject;
        let mut mode = unit.mode;

        if let RepairMode::Append = mode {
            // Re-check under the record lock; a concurrently filled list
            // downgrades to the prune path.
            let new_id = state.new_id;
            let appended = self.index.update_node(subject, |rec| {
                if rec.neighbors.contains(&new_id) {
                    return false;
                }
                if rec.neighbors.len() < self.index.r() {
                    rec.neighbors.push(new_id);
                    return true;
                }
                false
            })?;
            let record = self.index.read_node(subject)?;
            if appended || record.neighbors.contains(&new_id) {
                return self.next_repair_vector(state, env);
            }
            mode = RepairMode::Prune(self.build_overflow_prune(
                subject,
                &record.vector,
                &record.neighbors,
                new_id,
                env,
            )?);
        }

        let RepairMode::Prune(mut prune) = mode else {
            unreachable!("append handled above");
        };
        let grant = self.remaining(slice_start, budget, env).max(Duration::from_nanos(1));
        let mut clock = EnvPruneClock::start(env, self.costs.prune_iter());
        match prune_slice(&mut prune, grant, &mut clock)? {
            SliceOutcome::Yielded(_) => {
                state.current = Some(RepairUnit {
                    subject,
                    mode: RepairMode::Prune(prune),
                });
                Ok(StepResult::Again(TaskKind::InsertReverseRepair(state)))
            }
            SliceOutcome::Completed(ids) => {
                if self.index.is_live(subject) {
                    self.index.update_node(subject, |rec| {
                        rec.neighbors = ids.clone();
                        true
                    })?;
                }
                self.next_repair_vector(state, env)
            }
        }
    }

    fn next_repair_vector(
        &self,
        state: ReverseRepairState,
        _env: &dyn ThreadEnv,
    ) -> Result<StepResult> {
        if state.pending.is_empty() && state.current.is_none() {
            Ok(StepResult::Done)
        } else {
            // One vector per slice: the remainder self-re-enqueues.
            Ok(StepResult::Again(TaskKind::InsertReverseRepair(state)))
        }
    }

    fn run_delete_scan(
        &self,
        mut state: DeleteScanState,
        origin: &Arc<OpTracker>,
        slice_start: Duration,
        budget: Duration,
        env: &dyn ThreadEnv,
    ) -> Result<StepResult> {
        while state.cursor < state.end {
            let id = VectorId(state.cursor);
            state.cursor += 1;
            env.charge(self.costs.scan_record(1));
            if !self.index.is_live(id) {
                if self.remaining(slice_start, budget, env).is_zero() && state.cursor < state.end {
                    return Ok(StepResult::Again(TaskKind::DeleteScan(state)));
                }
                continue;
            }
            let record = self.index.read_node(id)?;
            let hits: Vec<VectorId> = record
                .neighbors
                .iter()
                .copied()
                .filter(|nb| state.deleted.contains(nb))
                .collect();
            if !hits.is_empty() {
                let prune = self.build_delete_repair_pool(id, &record, &hits, &state.deleted, env)?;
                origin.remaining.fetch_add(1, Ordering::AcqRel);
                self.queue.enqueue_new(UpdateTask {
                    kind: TaskKind::DeleteRepair(DeleteRepairState { subject: id, prune }),
                    origin: Arc::clone(origin),
                });
            }
            if self.remaining(slice_start, budget, env).is_zero() && state.cursor < state.end {
                return Ok(StepResult::Again(TaskKind::DeleteScan(state)));
            }
        }
        Ok(StepResult::Done)
    }

    /// Frozen candidate pool for a node `x` that references deleted ids:
    /// `(neighbors(x) \ D) ∪ (∪_{d ∈ D ∩ neighbors(x)} neighbors(d) \ D \ {x})`,
    /// restricted to live nodes, with exact distances to `x`.
    fn build_delete_repair_pool(
        &self,
        subject: VectorId,
        record: &crate::graph_index::NodeRecord,
        hits: &[VectorId],
        deleted: &HashSet<VectorId>,
        env: &dyn ThreadEnv,
    ) -> Result<PruneTaskState> {
        let mut pool_ids: Vec<VectorId> = Vec::new();
        let mut seen = HashSet::new();
        for &nb in &record.neighbors {
            if !deleted.contains(&nb) && self.index.is_live(nb) && seen.insert(nb) {
                pool_ids.push(nb);
            }
        }
        for &d in hits {
            for nb in self.index.neighbors(d)? {
                if nb != subject
                    && !deleted.contains(&nb)
                    && self.index.is_live(nb)
                    && seen.insert(nb)
                {
                    pool_ids.push(nb);
                }
            }
        }
        let mut entries = Vec::with_capacity(pool_ids.len());
        for nb in pool_ids {
            let vec = self.index.vector(nb)?;
            entries.push((
                Candidate {
                    id: nb,
                    dist_to_target: l2_distance(&record.vector, &vec),
                },
                vec,
            ));
        }
        env.charge(self.costs.exact_dist(entries.len()));
        PruneTaskState::new(
            record.vector.clone(),
            entries,
            self.index.config().alpha_prune,
            self.index.r(),
        )
    }

    fn run_delete_repair(
        &self,
        mut state: DeleteRepairState,
        slice_start: Duration,
        budget: Duration,
        env: &dyn ThreadEnv,
    ) -> Result<StepResult> {
        let grant = self.remaining(slice_start, budget, env).max(Duration::from_nanos(1));
        let mut clock = EnvPruneClock::start(env, self.costs.prune_iter());
        match prune_slice(&mut state.prune, grant, &mut clock)? {
            SliceOutcome::Yielded(_) => Ok(StepResult::Again(TaskKind::DeleteRepair(state))),
            SliceOutcome::Completed(ids) => {
                if self.index.is_live(state.subject) {
                    self.index.update_node(state.subject, |rec| {
                        rec.neighbors = ids.clone();
                        true
                    })?;
                }
                Ok(StepResult::Done)
            }
        }
    }
}

// ----- synchronous oracle -----

/// Apply ops one at a time with no queue, no budgets and the monolithic prune:
/// the scheduling-free reference the sliced task machinery is compared to.
/// Pool construction is shared with the engine, so both paths see identical
/// frozen pools when ops are serialized.
pub fn apply_synchronously(index: &Arc<Index>, ops: &[UpdateOp]) -> Result<()> {
    for op in ops {
        match op {
            UpdateOp::Insert(v) => sync_insert(index, v.clone())?,
            UpdateOp::Delete(ids) => sync_delete(index, ids)?,
        }
    }
    Ok(())
}

fn sync_insert(index: &Arc<Index>, vector: Vec<f32>) -> Result<()> {
    let id = index.allocate_staged(&vector)?;
    if index.live_count() == 0 {
        index.mark_live(id);
        index.set_entry_point(id);
        return Ok(());
    }
    let cfg = index.config().clone();
    let expanded = expand_candidates(index, &vector, cfg.l_build, 4)?;
    let pool: Vec<Candidate> = expanded
        .iter()
        .filter(|c| c.id != id)
        .map(|c| Candidate {
            id: c.id,
            dist_to_target: c.distance,
        })
        .collect();
    let vectors: Vec<&[f32]> = expanded
        .iter()
        .filter(|c| c.id != id)
        .map(|c| c.vector.as_slice())
        .collect();
    let selected = prune_monolithic(&vector, &pool, &vectors, cfg.alpha_prune, cfg.r);
    index.update_node(id, |rec| {
        rec.neighbors = selected.clone();
        true
    })?;
    index.mark_live(id);
    if !index.is_live(index.entry_point()) {
        index.set_entry_point(id);
    }
    for &nb in &selected {
        let record = index.read_node(nb)?;
        if record.neighbors.contains(&id) {
            continue;
        }
        if record.neighbors.len() < cfg.r {
            index.update_node(nb, |rec| {
                rec.neighbors.push(id);
                true
            })?;
            continue;
        }
        let mut entries = Vec::new();
        for &cand in record.neighbors.iter().chain(std::iter::once(&id)) {
            if cand == nb || index.is_tombstoned(cand) {
                continue;
            }
            let vec = index.vector(cand)?;
            entries.push((
                Candidate {
                    id: cand,
                    dist_to_target: l2_distance(&record.vector, &vec),
                },
                vec,
            ));
        }
        let mut st = PruneTaskState::new(record.vector.clone(), entries, cfg.alpha_prune, cfg.r)?;
        let result = st.run_unbounded()?;
        index.update_node(nb, |rec| {
            rec.neighbors = result.clone();
            true
        })?;
    }
    Ok(())
}

fn sync_delete(index: &Arc<Index>, ids: &[VectorId]) -> Result<()> {
    let set: HashSet<VectorId> = ids.iter().copied().collect();
    // Mirror the engine's entry-point handling before tombstoning.
    let entry = index.entry_point();
    if set.contains(&entry) {
        let record = index.read_node(entry)?;
        let mut best: Option<(f32, VectorId)> = None;
        for nb in &record.neighbors {
            if set.contains(nb) || !index.is_live(*nb) {
                continue;
            }
            let d = l2_distance(&record.vector, &index.vector(*nb)?);
            if best.map_or(true, |(bd, bid)| (d, *nb) < (bd, bid)) {
                best = Some((d, *nb));
            }
        }
        let next = best.map(|(_, id)| id).or_else(|| {
            (0..index.allocated())
                .map(VectorId)
                .find(|id| index.is_live(*id) && !set.contains(id))
        });
        if let Some(id) = next {
            index.set_entry_point(id);
        }
    }
    index.tombstone(ids)?;
    let cfg = index.config().clone();
    let end = index.allocated();
    for raw in 0..end {
        let x = VectorId(raw);
        if !index.is_live(x) {
            continue;
        }
        let record = index.read_node(x)?;
        let hits: Vec<VectorId> = record
            .neighbors
            .iter()
            .copied()
            .filter(|nb| set.contains(nb))
            .collect();
        if hits.is_empty() {
            continue;
        }
        let mut pool_ids = Vec::new();
        let mut seen = HashSet::new();
        for &nb in &record.neighbors {
            if !set.contains(&nb) && index.is_live(nb) && seen.insert(nb) {
                pool_ids.push(nb);
            }
        }
        for &d in &hits {
            for nb in index.neighbors(d)? {
                if nb != x && !set.contains(&nb) && index.is_live(nb) && seen.insert(nb) {
                    pool_ids.push(nb);
                }
            }
        }
        let mut entries = Vec::new();
        for nb in pool_ids {
            let vec = index.vector(nb)?;
            entries.push((
                Candidate {
                    id: nb,
                    dist_to_target: l2_distance(&record.vector, &vec),
                },
                vec,
            ));
        }
        let mut st = PruneTaskState::new(record.vector.clone(), entries, cfg.alpha_prune, cfg.r)?;
        let result = st.run_unbounded()?;
        index.update_node(x, |rec| {
            rec.neighbors = result.clone();
            true
        })?;
    }
    index.reclaim(ids);
    Ok(())
}

// ----- workload file -----

/// Parse a newline-delimited op file: `I <components...>` or `D <id>`.
pub fn parse_workload(text: &str) -> Result<Vec<UpdateOp>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |m: String| Error::Format(format!("workload line {}: {m}", lineno + 1));
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("I") => {
                let components: std::result::Result<Vec<f32>, _> =
                    parts.map(|p| p.parse::<f32>()).collect();
                let components =
                    components.map_err(|_| fail("bad vector component".into()))?;
                if components.is_empty() {
                    return Err(fail("insert needs components".into()));
                }
                out.push(UpdateOp::Insert(components));
            }
            Some("D") => {
                let id: u32 = parts
                    .next()
                    .ok_or_else(|| fail("delete needs an id".into()))?
                    .parse()
                    .map_err(|_| fail("bad id".into()))?;
                if parts.next().is_some() {
                    return Err(fail("trailing tokens after delete id".into()));
                }
                out.push(UpdateOp::Delete(vec![VectorId(id)]));
            }
            Some(other) => return Err(fail(format!("unknown op '{other}'"))),
            None => {}
        }
    }
    Ok(out)
}

// ----- co-execution hook -----

/// Wires budgeting, tuning and the update engine into a search-side stall
/// hook: on a stall it looks up the bucket's solved budget, scales it by the
/// tuner's utilization ratio, and runs update slices within the grant. One
/// hook per search thread (the K-sparse counter is thread-local).
pub struct CoexecHook {
    engine: Arc<UpdateEngine>,
    budgets: Arc<BudgetTable>,
    tuner: Arc<Tuner>,
    hop_counter: u64,
    /// Slices allowed per stall; 1 dequeues a single task per hop.
    slices_per_stall: usize,
}

impl CoexecHook {
    pub fn new(engine: Arc<UpdateEngine>, budgets: Arc<BudgetTable>, tuner: Arc<Tuner>) -> Self {
        Self {
            engine,
            budgets,
            tuner,
            hop_counter: 0,
            slices_per_stall: 1,
        }
    }

    pub fn with_slices_per_stall(mut self, n: usize) -> Self {
        self.slices_per_stall = n.max(1);
        self
    }
}

impl StallHook for CoexecHook {
    fn on_stall(&mut self, batch_size: usize, env: &dyn ThreadEnv) -> usize {
        self.hop_counter += 1;
        let cfg = self.budgets.config();
        if cfg.mode == BudgetMode::KSparse && self.hop_counter % cfg.k_sparse as u64 != 0 {
            return 0;
        }
        let Some(tau_est) = self.budgets.get_budget(batch_size) else {
            return 0; // under-sampled bucket: skip co-execution
        };
        let mut grant = self.tuner.effective_budget(tau_est);
        if grant.is_zero() {
            return 0;
        }
        let mut ran = 0;
        for _ in 0..self.slices_per_stall {
            let before = env.now();
            let slice = self.engine.run_slice(grant, env);
            if !slice.ran {
                break;
            }
            ran += 1;
            grant = grant.saturating_sub(env.now() - before);
            if grant.is_zero() {
                break;
            }
        }
        ran
    }

    fn on_idle_sample(&mut self, sample: IdleSample) {
        self.budgets.record_sample(sample);
    }
}
