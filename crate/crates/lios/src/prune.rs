//! SNG neighbor selection: the monolithic procedure and its resumable,
//! checkpoint-able form.
//!
//! Both walk a candidate pool sorted ascending by distance to the target,
//! repeatedly selecting the closest not-yet-done candidate and eliminating
//! every later candidate `p'` with `alpha * d(p*, p') <= d(p, p')`, until R
//! neighbors are selected or the pool is exhausted. The resumable form
//! checkpoints `(result, done, i, j)` when its time budget expires — after an
//! inner-loop iteration, so a slice overruns by at most one iteration — and a
//! later slice continues from the saved cursors. Slicing changes only *when*
//! the computation executes, never *what* it executes: composed slices return
//! results bit-identical to the monolithic procedure.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::graph_index::{l2_distance, VectorId};
use crate::time::ThreadEnv;
use crate::util::BitSet;

/// A pool member: id plus its (frozen) distance to the prune target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub id: VectorId,
    pub dist_to_target: f32,
}

/// Resumable state of an interrupted prune: selected pool positions, per-pool
/// done flags, and the outer/inner cursors.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneCheckpoint {
    /// Pool positions selected so far, in selection order.
    pub result: Vec<u32>,
    pub done: BitSet,
    pub i: u32,
    pub j: u32,
}

impl PruneCheckpoint {
    /// Wire format, little-endian:
    /// `u32 result_len | result u32*len | packed done bits | u32 i | u32 j`.
    /// Used for tests and diagnostics; checkpoints normally stay in memory.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.result.len() as u32).to_le_bytes());
        for &p in &self.result {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out.extend_from_slice(&self.done.to_bytes());
        out.extend_from_slice(&self.i.to_le_bytes());
        out.extend_from_slice(&self.j.to_le_bytes());
        out
    }

    pub fn deserialize(bytes: &[u8], pool_len: usize) -> Result<Self> {
        let fail = |m: &str| Error::InvalidCheckpoint(m.into());
        if bytes.len() < 4 {
            return Err(fail("truncated"));
        }
        let result_len = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let bits_len = pool_len.div_ceil(8);
        let expected = 4 + result_len * 4 + bits_len + 8;
        if bytes.len() != expected {
            return Err(fail("length mismatch"));
        }
        let mut result = Vec::with_capacity(result_len);
        for k in 0..result_len {
            let off = 4 + k * 4;
            result.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
        }
        let bits_off = 4 + result_len * 4;
        let done = BitSet::from_bytes(&bytes[bits_off..bits_off + bits_len], pool_len)
            .ok_or_else(|| fail("bad done bitset"))?;
        let i = u32::from_le_bytes(bytes[bits_off + bits_len..bits_off + bits_len + 4].try_into().unwrap());
        let j = u32::from_le_bytes(bytes[bits_off + bits_len + 4..bits_off + bits_len + 8].try_into().unwrap());
        Ok(Self { result, done, i, j })
    }

    fn validate(&self, pool_len: usize, r: usize) -> Result<()> {
        let fail = |m: String| Error::InvalidCheckpoint(m);
        if self.done.len() != pool_len {
            return Err(fail(format!(
                "done length {} != pool length {pool_len}",
                self.done.len()
            )));
        }
        if self.result.len() > r {
            return Err(fail(format!("result length {} > R={r}", self.result.len())));
        }
        let mut seen = BitSet::new(pool_len);
        for &p in &self.result {
            if p as usize >= pool_len {
                return Err(fail(format!("result position {p} out of bounds")));
            }
            if !self.done.get(p as usize) {
                return Err(fail(format!("selected position {p} not marked done")));
            }
            if seen.get(p as usize) {
                return Err(fail(format!("duplicate result position {p}")));
            }
            seen.set(p as usize);
        }
        if !(self.i < self.j && self.j as usize <= pool_len) {
            return Err(fail(format!(
                "cursors out of range: i={}, j={}, pool={pool_len}",
                self.i, self.j
            )));
        }
        Ok(())
    }
}

/// A per-vector prune task: immutable target, pool and candidate vectors, plus
/// the optional checkpoint of an interrupted run. The pool is fixed at
/// creation and never mutated, so slices need no synchronization.
pub struct PruneTaskState {
    target: Vec<f32>,
    pool: Vec<Candidate>,
    cand_data: Vec<f32>, // candidate vectors, dim-strided, parallel to pool
    dim: usize,
    alpha_prune: f32,
    r: usize,
    checkpoint: Option<PruneCheckpoint>,
}

impl PruneTaskState {
    /// Build a task from unsorted `(candidate, vector)` entries; sorts the pool
    /// ascending by `(dist_to_target, id)`.
    pub fn new(
        target: Vec<f32>,
        entries: Vec<(Candidate, Vec<f32>)>,
        alpha_prune: f32,
        r: usize,
    ) -> Result<Self> {
        let dim = target.len();
        let mut entries = entries;
        for (c, v) in &entries {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            if !c.dist_to_target.is_finite() || c.dist_to_target < 0.0 {
                return Err(Error::InvalidRecord(format!(
                    "candidate {} has invalid distance {}",
                    c.id, c.dist_to_target
                )));
            }
        }
        entries.sort_by(|(a, _), (b, _)| {
            a.dist_to_target
                .partial_cmp(&b.dist_to_target)
                .unwrap()
                .then(a.id.cmp(&b.id))
        });
        let mut pool = Vec::with_capacity(entries.len());
        let mut cand_data = Vec::with_capacity(entries.len() * dim);
        for (c, v) in entries {
            pool.push(c);
            cand_data.extend_from_slice(&v);
        }
        Ok(Self {
            target,
            pool,
            cand_data,
            dim,
            alpha_prune,
            r,
            checkpoint: None,
        })
    }

    pub fn target(&self) -> &[f32] {
        &self.target
    }

    pub fn pool(&self) -> &[Candidate] {
        &self.pool
    }

    pub fn checkpoint(&self) -> Option<&PruneCheckpoint> {
        self.checkpoint.as_ref()
    }

    /// Install a checkpoint to resume from; rejects checkpoints inconsistent
    /// with this task's pool.
    pub fn restore(&mut self, checkpoint: PruneCheckpoint) -> Result<()> {
        checkpoint.validate(self.pool.len(), self.r)?;
        self.checkpoint = Some(checkpoint);
        Ok(())
    }

    #[inline]
    fn cand_vector(&self, pos: usize) -> &[f32] {
        &self.cand_data[pos * self.dim..(pos + 1) * self.dim]
    }

    /// Run to completion with no budget; reference path for tests.
    pub fn run_unbounded(&mut self) -> Result<Vec<VectorId>> {
        let mut clock = TickClock::new(Duration::ZERO);
        match prune_slice(self, Duration::MAX, &mut clock)? {
            SliceOutcome::Completed(ids) => Ok(ids),
            SliceOutcome::Yielded(_) => unreachable!("unbounded slice cannot yield"),
        }
    }
}

/// Outcome of one prune slice.
#[derive(Debug, Clone, PartialEq)]
pub enum SliceOutcome {
    Completed(Vec<VectorId>),
    Yielded(PruneCheckpoint),
}

/// Clock a prune slice checks its budget against. `elapsed` is called after
/// every inner-loop iteration and returns time since the slice started;
/// virtual implementations charge the iteration's cost here.
pub trait PruneClock {
    fn elapsed(&mut self) -> Duration;
}

/// Wall-clock slice timer.
pub struct WallPruneClock {
    start: Instant,
}

impl WallPruneClock {
    pub fn start() -> Self {
        Self {
            start: Instant::now(),
        }
    }
}

impl PruneClock for WallPruneClock {
    fn elapsed(&mut self) -> Duration {
        self.start.elapsed()
    }
}

/// Fixed cost per iteration; deterministic clock for tests and oracles.
pub struct TickClock {
    elapsed: Duration,
    cost: Duration,
}

impl TickClock {
    pub fn new(cost_per_iteration: Duration) -> Self {
        Self {
            elapsed: Duration::ZERO,
            cost: cost_per_iteration,
        }
    }
}

impl PruneClock for TickClock {
    fn elapsed(&mut self) -> Duration {
        self.elapsed += self.cost;
        self.elapsed
    }
}

/// Charges a fixed virtual cost per iteration against a [`ThreadEnv`] and
/// reports elapsed time on that thread's clock.
pub struct EnvPruneClock<'a> {
    env: &'a dyn ThreadEnv,
    start: Duration,
    iter_cost: Duration,
}

impl<'a> EnvPruneClock<'a> {
    pub fn start(env: &'a dyn ThreadEnv, iter_cost: Duration) -> Self {
        Self {
            env,
            start: env.now(),
            iter_cost,
        }
    }
}

impl PruneClock for EnvPruneClock<'_> {
    fn elapsed(&mut self) -> Duration {
        self.env.charge(self.iter_cost);
        self.env.now() - self.start
    }
}

/// The uninterrupted SNG selection; also the oracle the resumable form is
/// checked against. `cand_vectors` parallels `pool`, which must be sorted
/// ascending by `(dist_to_target, id)`. An empty pool yields an empty result.
pub fn prune_monolithic(
    target: &[f32],
    pool: &[Candidate],
    cand_vectors: &[&[f32]],
    alpha_prune: f32,
    r: usize,
) -> Vec<VectorId> {
    debug_assert_eq!(pool.len(), cand_vectors.len());
    debug_assert!(cand_vectors.iter().all(|v| v.len() == target.len()));
    debug_assert!(pool.windows(2).all(|w| (w[0].dist_to_target, w[0].id)
        <= (w[1].dist_to_target, w[1].id)));
    let len = pool.len();
    let mut done = BitSet::new(len.max(1));
    let mut result: Vec<u32> = Vec::new();
    for i in 0..len {
        if done.get(i) {
            continue;
        }
        result.push(i as u32);
        done.set(i);
        if result.len() >= r {
            break;
        }
        for j in (i + 1)..len {
            if !done.get(j)
                && alpha_prune * l2_distance(cand_vectors[i], cand_vectors[j])
                    <= pool[j].dist_to_target
            {
                done.set(j);
            }
        }
    }
    result.into_iter().map(|p| pool[p as usize].id).collect()
}

/// Run (or resume) a prune for at most `budget` on `clock`. The budget check
/// runs after each inner-loop iteration, so a slice overruns by at most one
/// iteration. On expiry the checkpoint `(result, done, i, j+1)` is saved into
/// the task and also returned in [`SliceOutcome::Yielded`].
pub fn prune_slice(
    state: &mut PruneTaskState,
    budget: Duration,
    clock: &mut dyn PruneClock,
) -> Result<SliceOutcome> {
    let len = state.pool.len();
    let r = state.r;
    let alpha = state.alpha_prune;

    let (mut result, mut done, start_i, resume_j) = match state.checkpoint.take() {
        Some(cp) => {
            cp.validate(len, r)?;
            (cp.result, cp.done, cp.i as usize, Some(cp.j as usize))
        }
        None => (Vec::new(), BitSet::new(len.max(1)), 0, None),
    };

    let finish = |result: Vec<u32>, state: &PruneTaskState| {
        SliceOutcome::Completed(
            result
                .into_iter()
                .map(|p| state.pool[p as usize].id)
                .collect(),
        )
    };

    if len == 0 {
        return Ok(finish(result, state));
    }

    let mut i = start_i;
    let mut resume_j = resume_j;
    while i < len {
        let inner_start = match resume_j.take() {
            // Resuming: pool[i] is already selected and counted.
            Some(j) => j,
            None => {
                if done.get(i) {
                    i += 1;
                    continue;
                }
                result.push(i as u32);
                done.set(i);
                if result.len() >= r {
                    return Ok(finish(result, state));
                }
                i + 1
            }
        };
        for j in inner_start..len {
            if !done.get(j)
                && alpha * l2_distance(state.cand_vector(i), state.cand_vector(j))
                    <= state.pool[j].dist_to_target
            {
                done.set(j);
            }
            if clock.elapsed() >= budget {
                let cp = PruneCheckpoint {
                    result,
                    done,
                    i: i as u32,
                    j: (j + 1) as u32,
                };
                state.checkpoint = Some(cp.clone());
                return Ok(SliceOutcome::Yielded(cp));
            }
        }
        i += 1;
    }
    Ok(finish(result, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn make_entries(
        target: &[f32],
        coords: &[(f32, f32)],
        first_id: u32,
    ) -> Vec<(Candidate, Vec<f32>)> {
        coords
            .iter()
            .enumerate()
            .map(|(k, &(x, y))| {
                let v = vec![x, y];
                (
                    Candidate {
                        id: VectorId(first_id + k as u32),
                        dist_to_target: l2_distance(target, &v),
                    },
                    v,
                )
            })
            .collect()
    }

    /// Six-candidate geometry where the first selection eliminates c1 and c3,
    /// the second eliminates nothing, and R=3 stops after c4.
    pub(crate) fn worked_example() -> (Vec<f32>, Vec<(Candidate, Vec<f32>)>) {
        let target = vec![0.0f32, 0.0];
        let coords = [
            (1.0, 0.0),    // c0
            (1.1, 0.0),    // c1: killed by c0
            (-1.2, 0.0),   // c2
            (1.3, 0.05),   // c3: killed by c0
            (0.0, 1.4),    // c4
            (0.0, -1.5),   // c5
        ];
        let entries = make_entries(&target, &coords, 100);
        (target, entries)
    }

    fn monolithic_of(state: &PruneTaskState) -> Vec<VectorId> {
        let vectors: Vec<&[f32]> = (0..state.pool.len()).map(|p| state.cand_vector(p)).collect();
        prune_monolithic(
            &state.target,
            &state.pool,
            &vectors,
            state.alpha_prune,
            state.r,
        )
    }

    #[test]
    fn empty_pool_gives_empty_result() {
        assert!(prune_monolithic(&[0.0], &[], &[], 1.2, 4).is_empty());
        let mut st = PruneTaskState::new(vec![0.0], vec![], 1.2, 4).unwrap();
        assert_eq!(st.run_unbounded().unwrap(), Vec::<VectorId>::new());
    }

    #[test]
    fn singleton_pool_selects_the_candidate() {
        let entry = (
            Candidate {
                id: VectorId(9),
                dist_to_target: 2.0,
            },
            vec![2.0, 0.0],
        );
        let mut st = PruneTaskState::new(vec![0.0, 0.0], vec![entry], 1.1, 1).unwrap();
        assert_eq!(st.run_unbounded().unwrap(), vec![VectorId(9)]);
    }

    #[test]
    fn worked_example_monolithic() {
        let (target, entries) = worked_example();
        let mut st = PruneTaskState::new(target, entries, 1.2, 3).unwrap();
        assert_eq!(
            st.run_unbounded().unwrap(),
            vec![VectorId(100), VectorId(102), VectorId(104)]
        );
    }

    #[test]
    fn worked_example_first_window_checkpoint() {
        let (target, entries) = worked_example();
        let mut st = PruneTaskState::new(target, entries, 1.2, 3).unwrap();
        // Iteration cost 1; budget expires after the 7th inner iteration,
        // which is (i=2, j=4).
        let mut clock = TickClock::new(Duration::from_micros(1));
        let out = prune_slice(&mut st, Duration::from_micros(7), &mut clock).unwrap();
        let SliceOutcome::Yielded(cp) = out else {
            panic!("expected yield");
        };
        assert_eq!(cp.result, vec![0, 2]);
        let done: Vec<bool> = (0..6).map(|k| cp.done.get(k)).collect();
        assert_eq!(done, [true, true, true, true, false, false]);
        assert_eq!(cp.i, 2);
        assert_eq!(cp.j, 5);
        // Second window completes and matches the monolithic result.
        let mut clock = TickClock::new(Duration::from_micros(1));
        let out = prune_slice(&mut st, Duration::MAX, &mut clock).unwrap();
        assert_eq!(
            out,
            SliceOutcome::Completed(vec![VectorId(100), VectorId(102), VectorId(104)])
        );
    }

    #[test]
    fn unbounded_budget_equals_monolithic() {
        let (target, entries) = worked_example();
        let mut st = PruneTaskState::new(target, entries, 1.2, 3).unwrap();
        let expected = monolithic_of(&st);
        assert_eq!(st.run_unbounded().unwrap(), expected);
    }

    fn random_state(rng: &mut ChaCha8Rng) -> PruneTaskState {
        let dim = rng.gen_range(2..=4);
        let n = rng.gen_range(0..=64);
        let r = rng.gen_range(1..=16);
        let alpha = 1.0 + rng.gen_range(0.0..0.5);
        let target: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let entries: Vec<(Candidate, Vec<f32>)> = (0..n)
            .map(|k| {
                let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                (
                    Candidate {
                        id: VectorId(k as u32),
                        dist_to_target: l2_distance(&target, &v),
                    },
                    v,
                )
            })
            .collect();
        PruneTaskState::new(target, entries, alpha, r).unwrap()
    }

    fn run_sliced(state: &mut PruneTaskState, rng: &mut ChaCha8Rng) -> (Vec<VectorId>, usize) {
        let mut slices = 0;
        loop {
            slices += 1;
            let budget = Duration::from_micros(rng.gen_range(1..=3));
            let mut clock = TickClock::new(Duration::from_micros(1));
            match prune_slice(state, budget, &mut clock).unwrap() {
                SliceOutcome::Completed(ids) => return (ids, slices),
                SliceOutcome::Yielded(_) => continue,
            }
        }
    }

    #[test]
    fn sliced_equals_monolithic_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..500 {
            let mut st = random_state(&mut rng);
            let expected = monolithic_of(&st);
            let (got, _) = run_sliced(&mut st, &mut rng);
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn checkpoint_serialization_preserves_behavior() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let mut st = random_state(&mut rng);
            let expected = monolithic_of(&st);
            // Run a few slices, then serialize/deserialize the checkpoint into
            // a fresh task over the same pool and finish there.
            let mut clock = TickClock::new(Duration::from_micros(1));
            match prune_slice(&mut st, Duration::from_micros(2), &mut clock).unwrap() {
                SliceOutcome::Completed(ids) => assert_eq!(ids, expected),
                SliceOutcome::Yielded(cp) => {
                    let bytes = cp.serialize();
                    let revived =
                        PruneCheckpoint::deserialize(&bytes, st.pool.len()).unwrap();
                    assert_eq!(revived, cp);
                    st.restore(revived).unwrap();
                    let got = st.run_unbounded().unwrap();
                    assert_eq!(got, expected);
                }
            }
        }
    }

    #[test]
    fn restore_rejects_wrong_length() {
        let (target, entries) = worked_example();
        let mut st = PruneTaskState::new(target, entries, 1.2, 3).unwrap();
        let cp = PruneCheckpoint {
            result: vec![0],
            done: BitSet::new(5), // pool has 6
            i: 0,
            j: 1,
        };
        assert!(matches!(st.restore(cp), Err(Error::InvalidCheckpoint(_))));
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let (target, entries) = worked_example();
        let mut st = PruneTaskState::new(target, entries, 1.2, 3).unwrap();
        // Selected position not marked done.
        let cp = PruneCheckpoint {
            result: vec![0],
            done: BitSet::new(6),
            i: 0,
            j: 1,
        };
        assert!(st.restore(cp).is_err());
        // Cursor order violated.
        let mut done = BitSet::new(6);
        done.set(0);
        let cp = PruneCheckpoint {
            result: vec![0],
            done,
            i: 3,
            j: 2,
        };
        assert!(st.restore(cp).is_err());
    }

    #[test]
    fn selection_order_and_postcondition() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let st = random_state(&mut rng);
            if st.pool.is_empty() {
                continue;
            }
            let result = monolithic_of(&st);
            // The closest candidate is always selected.
            assert_eq!(result[0], st.pool[0].id);
            let pos_of = |id: VectorId| st.pool.iter().position(|c| c.id == id).unwrap();
            let sel_pos: Vec<usize> = result.iter().map(|&id| pos_of(id)).collect();
            // Later-selected members were never eliminated by earlier ones.
            for (a, &pa) in sel_pos.iter().enumerate() {
                for &pb in sel_pos.iter().skip(a + 1) {
                    let d = l2_distance(st.cand_vector(pa), st.cand_vector(pb));
                    assert!(st.alpha_prune * d > st.pool[pb].dist_to_target);
                }
            }
            // Every skipped member before the final selection is explained by
            // an earlier-selected eliminator.
            let last = *sel_pos.last().unwrap();
            for x in 0..last {
                if sel_pos.contains(&x) {
                    continue;
                }
                let explained = sel_pos.iter().filter(|&&p| p < x).any(|&p| {
                    st.alpha_prune * l2_distance(st.cand_vector(p), st.cand_vector(x))
                        <= st.pool[x].dist_to_target
                });
                assert!(explained, "unexplained skip at pool position {x}");
            }
        }
    }

    #[test]
    fn monotone_progress_under_minimal_budget() {
        let (target, entries) = worked_example();
        let mut st = PruneTaskState::new(target, entries, 1.2, 3).unwrap();
        let mut cursor = (0u32, 0u32);
        let mut steps = 0;
        loop {
            let mut clock = TickClock::new(Duration::from_micros(1));
            match prune_slice(&mut st, Duration::from_micros(1), &mut clock).unwrap() {
                SliceOutcome::Completed(ids) => {
                    assert_eq!(ids, vec![VectorId(100), VectorId(102), VectorId(104)]);
                    break;
                }
                SliceOutcome::Yielded(cp) => {
                    assert!((cp.i, cp.j) > cursor, "cursors must advance");
                    cursor = (cp.i, cp.j);
                }
            }
            steps += 1;
            assert!(steps < 100, "must terminate");
        }
    }
}
