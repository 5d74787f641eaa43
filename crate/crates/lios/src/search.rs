//! BeamSearch over the graph with the submit-execute-poll hop structure.
//!
//! Each hop expands the W closest unvisited candidates: their records are
//! submitted to the device in one batch, and while reads are in flight the
//! optional stall hook may run bounded update work. Completions are then
//! harvested (non-blocking poll first, blocking wait for the rest) and newly
//! discovered neighbors enter the L-bounded candidate pool by compressed
//! distance. Traversal ends when every pool entry has been visited; results
//! are re-ranked by exact distance over the raw vectors fetched on the way.

use std::collections::HashMap;
use std::time::Duration;

use crate::budgeting::IdleSample;
use crate::error::{Error, Result};
use crate::graph_index::{l2_distance, Index, VectorId};
use crate::io_layer::{DeviceHandle, ReadRequest};
use crate::time::{CpuCostModel, NullEnv, ThreadEnv};
use crate::util::BitSet;

#[derive(Debug, Clone, Copy)]
pub struct QueryParams {
    /// Result size.
    pub k: usize,
    /// Candidate pool capacity.
    pub l: usize,
    /// Beam width: records fetched per hop.
    pub w: usize,
}

impl QueryParams {
    pub fn new(k: usize, l: usize, w: usize) -> Self {
        Self { k, l, w }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.l {
            return Err(Error::InvalidConfig(format!(
                "require 1 <= K <= L, got K={} L={}",
                self.k, self.l
            )));
        }
        if self.w == 0 {
            return Err(Error::InvalidConfig("beam width W must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-query traversal statistics.
#[derive(Debug, Clone, Default)]
pub struct SearchStats {
    pub hops: usize,
    /// Read requests submitted to the device.
    pub io_count: usize,
    /// Per-hop stall measurements (duration of the in-flight window, batch
    /// size of the hop). Zero-duration entries are hops fully served without
    /// waiting (device cache hits).
    pub idle: Vec<IdleSample>,
    /// End-to-end query latency on the executing thread's clock.
    pub latency: Duration,
    /// Update slices co-executed inside this query's stalls.
    pub slices_run: usize,
    /// Hops whose reads all completed without any wait.
    pub cache_hit_hops: usize,
}

/// Fraction of query time spent stalled on reads, in [0, 1].
pub fn idle_ratio(stats: &SearchStats) -> f64 {
    if stats.latency.is_zero() {
        return 0.0;
    }
    let idle: f64 = stats.idle.iter().map(|s| s.duration.as_secs_f64()).sum();
    (idle / stats.latency.as_secs_f64()).clamp(0.0, 1.0)
}

/// Co-execution callback invoked while a hop's reads are in flight. Work must
/// be bounded: the callee returns before the caller re-polls.
pub trait StallHook {
    /// Run at most the permitted update work for a stall with `batch_size`
    /// outstanding reads; returns the number of slices executed.
    fn on_stall(&mut self, batch_size: usize, env: &dyn ThreadEnv) -> usize;

    /// Observed stall sample for a hop that issued device reads and waited.
    fn on_idle_sample(&mut self, _sample: IdleSample) {}
}

/// A node whose record was fetched during traversal.
#[derive(Debug, Clone)]
pub struct Expanded {
    pub id: VectorId,
    /// Exact distance to the query, from the raw vector.
    pub distance: f32,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
struct PoolEntry {
    id: VectorId,
    dist: f32,
    visited: bool,
}

/// L-bounded sorted candidate pool plus the visited/seen bookkeeping shared by
/// the device-backed and store-backed traversals.
struct BeamCore {
    pool: Vec<PoolEntry>,
    seen: BitSet,
    expanded: Vec<Expanded>,
    exact: HashMap<VectorId, f32>,
    l: usize,
}

impl BeamCore {
    fn new(index: &Index, l: usize) -> Self {
        Self {
            pool: Vec::with_capacity(l + 1),
            seen: BitSet::new(index.capacity().max(1)),
            expanded: Vec::new(),
            exact: HashMap::new(),
            l,
        }
    }

    /// Insert by `(dist, id)` order, truncating to the L nearest. Marks the id
    /// seen regardless: with a fixed query its distance never changes, so a
    /// rejection now would repeat later.
    fn insert(&mut self, id: VectorId, dist: f32) {
        if self.seen.get(id.index()) {
            return;
        }
        self.seen.set(id.index());
        let key = (dist, id);
        let pos = self
            .pool
            .partition_point(|e| (e.dist, e.id) < key);
        if pos >= self.l {
            return;
        }
        self.pool.insert(
            pos,
            PoolEntry {
                id,
                dist,
                visited: false,
            },
        );
        self.pool.truncate(self.l);
    }

    /// The W closest unvisited candidates, marked visited.
    fn take_frontier(&mut self, w: usize) -> Vec<VectorId> {
        let mut out = Vec::with_capacity(w);
        for entry in self.pool.iter_mut() {
            if !entry.visited {
                entry.visited = true;
                out.push(entry.id);
                if out.len() == w {
                    break;
                }
            }
        }
        out
    }

    fn note_expanded(&mut self, id: VectorId, vector: Vec<f32>, distance: f32) {
        self.exact.insert(id, distance);
        self.expanded.push(Expanded {
            id,
            distance,
            vector,
        });
    }

    /// Top-K live pool entries by exact distance (ties to the lower id).
    fn results(&self, index: &Index, k: usize) -> Vec<(VectorId, f32)> {
        let mut ranked: Vec<(VectorId, f32)> = self
            .pool
            .iter()
            .filter(|e| index.is_live(e.id))
            .filter_map(|e| self.exact.get(&e.id).map(|&d| (e.id, d)))
            .collect();
        ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }
}

/// BeamSearch through the block device, with optional co-execution during
/// stalls. Returns the top-K live ids with exact distances, plus stats.
pub fn beam_search(
    index: &Index,
    handle: &mut dyn DeviceHandle,
    query: &[f32],
    params: &QueryParams,
    mut hook: Option<&mut dyn StallHook>,
    env: &dyn ThreadEnv,
    costs: &CpuCostModel,
) -> Result<(Vec<(VectorId, f32)>, SearchStats)> {
    params.validate()?;
    if query.len() != index.dim() {
        return Err(Error::DimensionMismatch {
            expected: index.dim(),
            got: query.len(),
        });
    }
    if index.live_count() == 0 {
        return Err(Error::EmptyIndex);
    }
    let start = env.now();
    let mut stats = SearchStats::default();
    let mut core = BeamCore::new(index, params.l);
    let entry = index.entry_point();
    core.insert(entry, index.approx_distance(query, entry)?);
    env.charge(costs.approx_dist(1));

    loop {
        let frontier = core.take_frontier(params.w);
        if frontier.is_empty() {
            break;
        }
        stats.hops += 1;
        let batch_size = frontier.len();
        let requests: Vec<ReadRequest> = frontier
            .iter()
            .map(|&id| ReadRequest {
                request_id: id.0 as u64,
                offset: index.offset_of(id),
                length: index.padded_record_size(),
            })
            .collect();
        env.checkpoint();
        let t0 = env.now();
        handle.submit(&requests, env)?;
        stats.io_count += requests.len();

        // Submit - execute - poll: harvest what finished instantly, run update
        // work while the rest are in flight, then wait them out.
        let mut completions = handle.poll_nonblocking(env)?;
        let stalled = completions.len() < requests.len();
        if stalled {
            if let Some(h) = hook.as_deref_mut() {
                stats.slices_run += h.on_stall(batch_size, env);
            }
            while completions.len() < requests.len() {
                let (more, _waited) = handle.wait_blocking(env)?;
                if more.is_empty() {
                    return Err(Error::Device(
                        "device returned no completions while requests were outstanding".into(),
                    ));
                }
                completions.extend(more);
            }
        } else {
            stats.cache_hit_hops += 1;
        }
        let stall = env.now() - t0;
        let sample = IdleSample {
            duration: stall,
            batch_size,
        };
        stats.idle.push(sample);
        if stalled {
            if let Some(h) = hook.as_deref_mut() {
                h.on_idle_sample(sample);
            }
        }

        // Expand: exact-rank the fetched nodes, walk their out-neighbors.
        let mut approx_evals = 0usize;
        for completion in completions {
            let id = VectorId(completion.request_id as u32);
            let record = index.decode_payload(id, &completion.payload)?;
            let exact = l2_distance(query, &record.vector);
            core.note_expanded(id, record.vector, exact);
            for nb in record.neighbors {
                if !core.seen.get(nb.index()) && index.is_addressable(nb) {
                    let d = index.compressed().approx_distance(query, nb);
                    approx_evals += 1;
                    core.insert(nb, d);
                }
            }
        }
        env.charge(costs.approx_dist(approx_evals));
        env.charge(costs.exact_dist(batch_size));
        env.charge(costs.search_hop());
    }

    stats.latency = env.now() - start;
    Ok((core.results(index, params.k), stats))
}

/// Store-backed resumable traversal used inside update tasks and index build:
/// hops read the record store directly (no simulated latency) and the caller
/// decides between hops whether to keep going — the yield point when an
/// insert's search phase outlives its slice budget.
pub struct MemSearcher {
    core: BeamCore,
    query: Vec<f32>,
    w: usize,
    done: bool,
}

impl MemSearcher {
    pub fn new(index: &Index, query: Vec<f32>, l: usize, w: usize) -> Result<Self> {
        if query.len() != index.dim() {
            return Err(Error::DimensionMismatch {
                expected: index.dim(),
                got: query.len(),
            });
        }
        if index.live_count() == 0 {
            return Err(Error::EmptyIndex);
        }
        let mut core = BeamCore::new(index, l);
        let entry = index.entry_point();
        core.insert(entry, index.approx_distance(&query, entry)?);
        Ok(Self {
            core,
            query,
            w,
            done: false,
        })
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Run one hop; returns false once the traversal is complete.
    pub fn step_hop(&mut self, index: &Index, env: &dyn ThreadEnv, costs: &CpuCostModel) -> Result<bool> {
        if self.done {
            return Ok(false);
        }
        let frontier = self.core.take_frontier(self.w);
        if frontier.is_empty() {
            self.done = true;
            return Ok(false);
        }
        let mut approx_evals = 0usize;
        for id in &frontier {
            let record = index.read_node(*id)?;
            let exact = l2_distance(&self.query, &record.vector);
            self.core.note_expanded(*id, record.vector, exact);
            for nb in record.neighbors {
                if !self.core.seen.get(nb.index()) && index.is_addressable(nb) {
                    let d = index.compressed().approx_distance(&self.query, nb);
                    approx_evals += 1;
                    self.core.insert(nb, d);
                }
            }
        }
        env.charge(costs.approx_dist(approx_evals));
        env.charge(costs.exact_dist(frontier.len()));
        env.charge(costs.update_hop());
        Ok(true)
    }

    /// Expanded nodes (fetched records with exact distances), tombstones
    /// excluded; sorted ascending by `(distance, id)`.
    pub fn into_candidates(self, index: &Index) -> Vec<Expanded> {
        let mut out: Vec<Expanded> = self
            .core
            .expanded
            .into_iter()
            .filter(|e| index.is_live(e.id))
            .collect();
        out.sort_by(|a, b| {
            a.distance
                .partial_cmp(&b.distance)
                .unwrap()
                .then(a.id.cmp(&b.id))
        });
        out
    }
}

/// Run a full store-backed traversal and return the candidate set; the
/// synchronous path used by index build.
pub fn expand_candidates(
    index: &Index,
    query: &[f32],
    l: usize,
    w: usize,
) -> Result<Vec<Expanded>> {
    let env = NullEnv;
    let costs = CpuCostModel::default();
    let mut searcher = MemSearcher::new(index, query.to_vec(), l, w)?;
    while searcher.step_hop(index, &env, &costs)? {}
    Ok(searcher.into_candidates(index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_index::{exact_distance, IndexConfig, NodeRecord};
    use crate::io_layer::{BlockDevice, DeviceProfile, LatencyModel, SimDevice};
    use crate::time::ManualClock;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect()
    }

    fn sim_over(index: &Arc<Index>, us: f64, penalty: f64, cache: usize) -> SimDevice {
        let profile = DeviceProfile {
            latency_model: LatencyModel::Constant { us },
            concurrency_penalty_us: penalty,
            seed: 5,
            queue_depth: 64,
            cache_capacity: cache,
        };
        SimDevice::new(&profile, Arc::clone(index) as Arc<dyn crate::io_layer::PayloadSource>)
            .unwrap()
    }

    fn brute_force(vectors: &[Vec<f32>], query: &[f32], k: usize) -> Vec<VectorId> {
        let mut order: Vec<(f32, u32)> = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (l2_distance(query, v), i as u32))
            .collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        order.into_iter().take(k).map(|(_, i)| VectorId(i)).collect()
    }

    #[test]
    fn single_node_index_returns_it() {
        let idx = Arc::new(
            Index::build(&[vec![1.0, 1.0]], IndexConfig::new(2, 4, 8).with_align(64)).unwrap(),
        );
        let dev = sim_over(&idx, 50.0, 0.0, 0);
        let mut h = dev.open_handle(0).unwrap();
        let clock = ManualClock::new();
        let (results, stats) = beam_search(
            &idx,
            h.as_mut(),
            &[0.0, 0.0],
            &QueryParams::new(1, 4, 2),
            None,
            &clock,
            &CpuCostModel::default(),
        )
        .unwrap();
        assert_eq!(results.len(), 1);
        assert_eq!(results[0].0, VectorId(0));
        let want = exact_distance(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(results[0].1, want);
        assert_eq!(stats.hops, 1);
        assert!(stats.io_count >= stats.hops);
    }

    #[test]
    fn empty_index_is_an_error() {
        let idx = Arc::new(
            Index::build(&[vec![0.0, 0.0]], IndexConfig::new(2, 4, 8).with_align(64)).unwrap(),
        );
        idx.tombstone(&[VectorId(0)]).unwrap();
        let dev = sim_over(&idx, 10.0, 0.0, 0);
        let mut h = dev.open_handle(0).unwrap();
        let clock = ManualClock::new();
        let err = beam_search(
            &idx,
            h.as_mut(),
            &[0.0, 0.0],
            &QueryParams::new(1, 4, 2),
            None,
            &clock,
            &CpuCostModel::default(),
        );
        assert!(matches!(err, Err(Error::EmptyIndex)));
    }

    #[test]
    fn complete_graph_matches_brute_force() {
        // 5-node fully connected graph: beam search is exhaustive, so the
        // top-K must equal brute force exactly.
        let vectors = random_vectors(5, 3, 8);
        let idx = Arc::new(
            Index::build(&vectors, IndexConfig::new(3, 4, 8).with_align(64)).unwrap(),
        );
        for i in 0..5u32 {
            let neighbors: Vec<VectorId> =
                (0..5u32).filter(|&j| j != i).map(VectorId).collect();
            idx.write_node(
                VectorId(i),
                &NodeRecord {
                    vector: vectors[i as usize].clone(),
                    neighbors,
                },
            )
            .unwrap();
        }
        let dev = sim_over(&idx, 20.0, 0.0, 0);
        let mut h = dev.open_handle(0).unwrap();
        let clock = ManualClock::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q: Vec<f32> = (0..3).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let (results, _) = beam_search(
                &idx,
                h.as_mut(),
                &q,
                &QueryParams::new(3, 5, 1),
                None,
                &clock,
                &CpuCostModel::default(),
            )
            .unwrap();
            let ids: Vec<VectorId> = results.iter().map(|r| r.0).collect();
            assert_eq!(ids, brute_force(&vectors, &q, 3));
        }
    }

    #[test]
    fn recall_on_built_index() {
        let vectors = random_vectors(1000, 16, 17);
        let cfg = IndexConfig {
            r: 16,
            l_build: 32,
            ..IndexConfig::new(16, 16, 32)
        }
        .with_align(64);
        let idx = Arc::new(Index::build(&vectors, cfg).unwrap());
        // Build postcondition: all nodes reachable from the medoid.
        assert_eq!(idx.reachable_from_entry().count_ones(), 1000);
        let dev = sim_over(&idx, 5.0, 0.0, 0);
        let mut h = dev.open_handle(0).unwrap();
        let clock = ManualClock::new();
        let queries = random_vectors(100, 16, 18);
        let mut hits = 0;
        for q in &queries {
            let (results, _) = beam_search(
                &idx,
                h.as_mut(),
                q,
                &QueryParams::new(1, 32, 4),
                None,
                &clock,
                &CpuCostModel::default(),
            )
            .unwrap();
            if results[0].0 == brute_force(&vectors, q, 1)[0] {
                hits += 1;
            }
        }
        let recall = hits as f64 / queries.len() as f64;
        assert!(recall >= 0.95, "recall@1 = {recall}");
    }

    #[test]
    fn hop_idle_sample_reflects_constant_latency() {
        let vectors = random_vectors(50, 4, 30);
        let idx = Arc::new(
            Index::build(&vectors, IndexConfig::new(4, 6, 16).with_align(64)).unwrap(),
        );
        let dev = sim_over(&idx, 100.0, 0.0, 0);
        let mut h = dev.open_handle(0).unwrap();
        let clock = ManualClock::new();
        let (_, stats) = beam_search(
            &idx,
            h.as_mut(),
            &vectors[7],
            &QueryParams::new(1, 8, 1),
            None,
            &clock,
            &CpuCostModel::default(),
        )
        .unwrap();
        assert!(!stats.idle.is_empty());
        for sample in &stats.idle {
            assert_eq!(sample.batch_size, 1);
            assert_eq!(sample.duration, Duration::from_micros(100));
        }
        // Idle accounting: total idle never exceeds latency.
        let idle: Duration = stats.idle.iter().map(|s| s.duration).sum();
        assert!(idle <= stats.latency);
        let ratio = idle_ratio(&stats);
        assert!(ratio > 0.0 && ratio <= 1.0);
    }

    #[test]
    fn deterministic_given_seed_and_query() {
        let vectors = random_vectors(200, 8, 40);
        let idx = Arc::new(
            Index::build(&vectors, IndexConfig::new(8, 8, 16).with_align(64)).unwrap(),
        );
        let run = || {
            let dev = sim_over(&idx, 80.0, 4.0, 0);
            let mut h = dev.open_handle(0).unwrap();
            let clock = ManualClock::new();
            let (results, stats) = beam_search(
                &idx,
                h.as_mut(),
                &vectors[3],
                &QueryParams::new(5, 16, 4),
                None,
                &clock,
                &CpuCostModel::default(),
            )
            .unwrap();
            (results, stats.hops, stats.io_count, stats.latency)
        };
        assert_eq!(run(), run());
    }

    struct CountingHook {
        calls: usize,
    }

    impl StallHook for CountingHook {
        fn on_stall(&mut self, _batch_size: usize, _env: &dyn ThreadEnv) -> usize {
            self.calls += 1;
            0
        }
    }

    #[test]
    fn hook_with_empty_queue_is_transparent() {
        let vectors = random_vectors(300, 8, 50);
        let idx = Arc::new(
            Index::build(&vectors, IndexConfig::new(8, 8, 16).with_align(64)).unwrap(),
        );
        let run = |hooked: bool| {
            let dev = sim_over(&idx, 60.0, 2.0, 0);
            let mut h = dev.open_handle(0).unwrap();
            let clock = ManualClock::new();
            let mut hook = CountingHook { calls: 0 };
            let hook_ref: Option<&mut dyn StallHook> =
                if hooked { Some(&mut hook) } else { None };
            let (results, stats) = beam_search(
                &idx,
                h.as_mut(),
                &vectors[11],
                &QueryParams::new(10, 32, 4),
                hook_ref,
                &clock,
                &CpuCostModel::default(),
            )
            .unwrap();
            (results, stats.io_count, stats.hops, hook.calls)
        };
        let (r_plain, io_plain, hops_plain, _) = run(false);
        let (r_hooked, io_hooked, hops_hooked, calls) = run(true);
        assert_eq!(r_plain, r_hooked, "results must be bit-identical");
        assert_eq!(io_plain, io_hooked, "I/O counts must be unchanged");
        assert_eq!(hops_plain, hops_hooked);
        assert!(calls > 0, "hook must have been consulted during stalls");
    }

    #[test]
    fn cached_hop_skips_hook_and_has_zero_idle() {
        let vectors = random_vectors(40, 4, 60);
        let idx = Arc::new(
            Index::build(&vectors, IndexConfig::new(4, 6, 8).with_align(64)).unwrap(),
        );
        // Cache large enough for the whole index.
        let dev = sim_over(&idx, 100.0, 0.0, 64);
        let mut h = dev.open_handle(0).unwrap();
        let clock = ManualClock::new();
        let params = QueryParams::new(1, 8, 2);
        let costs = CpuCostModel::default();
        let mut hook = CountingHook { calls: 0 };
        let (_, first) = beam_search(
            &idx, h.as_mut(), &vectors[0], &params, Some(&mut hook), &clock, &costs,
        )
        .unwrap();
        assert!(first.cache_hit_hops == 0);
        let first_calls = hook.calls;
        assert!(first_calls > 0);
        // Same query again: every read hits the LRU, the hook is never
        // consulted, and stall durations are zero.
        let (_, second) = beam_search(
            &idx, h.as_mut(), &vectors[0], &params, Some(&mut hook), &clock, &costs,
        )
        .unwrap();
        assert_eq!(second.cache_hit_hops, second.hops);
        assert_eq!(hook.calls, first_calls, "hook not invoked on cache hits");
        assert!(second.idle.iter().all(|s| s.duration.is_zero()));
    }

    #[test]
    fn idle_ratio_matches_analytic_model() {
        // Constant 100us latency and a fixed 25us per-hop compute charge give
        // an analytic idle ratio of 100 / 125 = 0.8.
        let vectors = random_vectors(200, 4, 61);
        let idx = Arc::new(
            Index::build(&vectors, IndexConfig::new(4, 8, 16).with_align(64)).unwrap(),
        );
        let dev = sim_over(&idx, 100.0, 0.0, 0);
        let mut h = dev.open_handle(0).unwrap();
        let clock = ManualClock::new();
        let costs = CpuCostModel {
            approx_dist_us: 0.0,
            exact_dist_us: 0.0,
            search_hop_us: 25.0,
            ..CpuCostModel::default()
        };
        let (_, stats) = beam_search(
            &idx,
            h.as_mut(),
            &vectors[3],
            &QueryParams::new(1, 8, 1),
            None,
            &clock,
            &costs,
        )
        .unwrap();
        let ratio = idle_ratio(&stats);
        assert!(
            (ratio - 0.8).abs() <= 0.05 * 0.8,
            "idle ratio {ratio} vs analytic 0.8"
        );
    }

    #[test]
    fn idle_ratio_edge_cases() {
        let stats = SearchStats {
            latency: Duration::ZERO,
            ..SearchStats::default()
        };
        assert_eq!(idle_ratio(&stats), 0.0);
        let stats = SearchStats {
            latency: Duration::from_micros(100),
            idle: vec![IdleSample {
                duration: Duration::from_micros(100),
                batch_size: 1,
            }],
            ..SearchStats::default()
        };
        assert_eq!(idle_ratio(&stats), 1.0);
    }

    #[test]
    fn query_params_validation() {
        assert!(QueryParams::new(0, 8, 1).validate().is_err());
        assert!(QueryParams::new(9, 8, 1).validate().is_err());
        assert!(QueryParams::new(4, 8, 0).validate().is_err());
        assert!(QueryParams::new(4, 8, 2).validate().is_ok());
    }
}
