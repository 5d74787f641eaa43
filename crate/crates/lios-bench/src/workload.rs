//! Workload execution: saturated search threads and update producers over a
//! shared index, with paired baseline runs for speedup and degradation
//! accounting.
//!
//! In virtual-time mode every worker is a logical thread on the
//! [`VirtualExecutor`], so a whole co-execution run is a deterministic
//! function of the spec. Wall-time mode runs the same worker bodies on OS
//! threads against the real clock (and optionally a real file-backed device).

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use lios::budgeting::{BudgetConfig, BudgetTable};
use lios::graph_index::{Backing, Index, IndexConfig, LoadOptions, VectorId};
use lios::io_layer::{BlockDevice, DeviceProfile, FileDevice, SimDevice};
use lios::search::{beam_search, QueryParams};
use lios::time::{
    as_micros_f64, CpuCostModel, ManualClock, ThreadEnv, VirtualExecutor, VirtualThread, WallEnv,
};
use lios::tuner::{Tuner, TunerConfig};
use lios::update_engine::{CoexecHook, OpRecord, UpdateEngine, UpdateOp};
use lios::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ground_truth, load_vectors, recall_at_k, synthetic_mixture, DatasetSpec};
use crate::report::{
    LatencySummary, MetricsReport, PhaseArtifacts, PhaseMetrics, ReportArtifacts,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexParams {
    pub r: usize,
    pub l_build: usize,
    pub alpha_prune: f32,
    pub record_align: usize,
    pub quantizer_bits: u8,
}

impl Default for IndexParams {
    fn default() -> Self {
        Self {
            r: 16,
            l_build: 32,
            alpha_prune: 1.2,
            record_align: 4096,
            quantizer_bits: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct QuerySpec {
    pub k: usize,
    pub l: usize,
    pub w: usize,
}

impl Default for QuerySpec {
    fn default() -> Self {
        Self { k: 10, l: 100, w: 4 }
    }
}

impl QuerySpec {
    fn params(&self) -> QueryParams {
        QueryParams::new(self.k, self.l, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhaseOrder {
    #[default]
    DeleteFirst,
    InsertFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    #[default]
    Sim,
    File,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub dataset: DatasetSpec,
    pub index: IndexParams,
    pub query: QuerySpec,
    pub search_threads: usize,
    pub update_threads: usize,
    pub delete_fraction: f64,
    pub insert_fraction: f64,
    /// The single user-facing knob: allowed search-latency degradation. Feeds
    /// both the budget solver and the tuner.
    pub theta: f64,
    pub device_kind: DeviceKind,
    pub device: DeviceProfile,
    pub budget: BudgetConfig,
    pub tuner: TunerConfig,
    pub costs: CpuCostModel,
    pub seed: u64,
    pub recall_queries: usize,
    /// Queries run by a pure-search workload (update_threads = 0).
    pub search_queries: usize,
    pub phase_order: PhaseOrder,
    pub virtual_time: bool,
    /// Run only the forced-zero-utilization variant.
    pub baseline_only: bool,
    /// Directory for the index files in file-device mode; temp if unset.
    pub index_dir: Option<PathBuf>,
    /// Explicit ops (from a workload file); replaces generated delete/insert
    /// phases with a single update phase.
    #[serde(skip)]
    pub updates: Option<Vec<UpdateOp>>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::Synthetic {
                n: 10_000,
                dim: 16,
                clusters: 8,
                seed: 0,
            },
            index: IndexParams::default(),
            query: QuerySpec::default(),
            search_threads: 8,
            update_threads: 2,
            delete_fraction: 0.05,
            insert_fraction: 0.05,
            theta: 0.05,
            device_kind: DeviceKind::Sim,
            device: DeviceProfile::default(),
            budget: BudgetConfig::default(),
            tuner: TunerConfig {
                epoch_queries: 100,
                ..TunerConfig::default()
            },
            costs: CpuCostModel::default(),
            seed: 0,
            recall_queries: 100,
            search_queries: 2000,
            phase_order: PhaseOrder::DeleteFirst,
            virtual_time: true,
            baseline_only: false,
            index_dir: None,
            updates: None,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.search_threads == 0 {
            return Err(Error::InvalidConfig("search_threads must be >= 1".into()));
        }
        for (name, f) in [
            ("delete_fraction", self.delete_fraction),
            ("insert_fraction", self.insert_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1]")));
            }
        }
        if self.theta < 0.0 {
            return Err(Error::InvalidConfig("theta must be >= 0".into()));
        }
        if self.virtual_time && self.device_kind == DeviceKind::File {
            return Err(Error::InvalidConfig(
                "virtual time requires the simulated device".into(),
            ));
        }
        self.query.params().validate()?;
        Ok(())
    }
}

struct PhasePlan {
    name: &'static str,
    ops: Vec<UpdateOp>,
    /// For search-only phases: the number of queries to run.
    query_target: Option<usize>,
}

#[derive(Default, Clone)]
struct ThreadLocalStats {
    latencies_us: Vec<f64>,
    idle: Vec<(usize, f64)>,
    io: u64,
    hops: u64,
    slices: u64,
    errors: u64,
    queries: usize,
    end_time: Duration,
}

/// Raw outcome of one phase, merged across workers in thread order.
#[derive(Default, Clone)]
pub struct PhaseRaw {
    pub name: String,
    pub duration: Duration,
    pub latencies_us: Vec<f64>,
    pub idle: Vec<(usize, f64)>,
    pub io: u64,
    pub hops: u64,
    pub slices: u64,
    pub errors: u64,
    pub queries: usize,
    pub update_vectors: usize,
    pub submit_errors: usize,
}

/// Everything one variant run produces.
pub struct VariantRaw {
    pub phases: Vec<PhaseRaw>,
    pub recall: Option<f64>,
    pub tuner_trace: Vec<lios::tuner::TraceRow>,
    pub ops: Vec<OpRecord>,
    pub failed_ops: usize,
    pub index: Arc<Index>,
    // Keeps file-backed indexes alive for the run's lifetime.
    _tempdir: Option<tempfile::TempDir>,
}

pub struct BenchOutput {
    pub report: MetricsReport,
    pub artifacts: ReportArtifacts,
    pub co: VariantRaw,
    pub baseline: Option<VariantRaw>,
}

struct VariantCtx {
    index: Arc<Index>,
    device: Arc<dyn BlockDevice>,
    engine: Arc<UpdateEngine>,
    budgets: Arc<BudgetTable>,
    tuner: Arc<Tuner>,
    params: QueryParams,
    costs: CpuCostModel,
    query_pool: Arc<Vec<Vec<f32>>>,
    search_threads: usize,
    update_threads: usize,
    virtual_time: bool,
}

/// Run the workload: build, execute phases with concurrent saturated search,
/// then (unless baseline-only) the matched no-co-execution baseline with the
/// same seeds, data, query stream and device profile — only the utilization
/// forcing differs. Emits the metrics report plus raw artifacts.
pub fn run_workload(spec: &WorkloadSpec) -> Result<BenchOutput> {
    spec.validate()?;
    let started = Instant::now();
    let base_vectors = load_vectors(&spec.dataset)?;
    if base_vectors.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = base_vectors[0].len();
    let query_pool = Arc::new(make_queries(spec, &base_vectors, dim));
    let plans = make_plans(spec, &base_vectors, dim)?;

    let co = run_variant(spec, &base_vectors, &query_pool, &plans, spec.baseline_only)?;
    let baseline = if !spec.baseline_only && plans.iter().any(|p| !p.ops.is_empty()) {
        Some(run_variant(spec, &base_vectors, &query_pool, &plans, true)?)
    } else {
        None
    };

    let report = assemble_report(spec, &base_vectors, dim, &co, baseline.as_ref(), started);
    let artifacts = ReportArtifacts {
        phases: co
            .phases
            .iter()
            .map(|p| PhaseArtifacts {
                name: p.name.clone(),
                latencies_us: p.latencies_us.clone(),
                idle_us: p.idle.clone(),
            })
            .collect(),
        tuner_trace: co.tuner_trace.clone(),
        ops: co.ops.clone(),
    };
    Ok(BenchOutput {
        report,
        artifacts,
        co,
        baseline,
    })
}

fn make_queries(spec: &WorkloadSpec, base: &[Vec<f32>], dim: usize) -> Vec<Vec<f32>> {
    let n = spec.recall_queries.max(256);
    match &spec.dataset {
        DatasetSpec::Synthetic {
            dim: sdim,
            clusters,
            seed,
            ..
        } => synthetic_mixture(n, *sdim, *clusters, *seed, 1),
        _ => {
            // File datasets: perturbed base vectors drawn with a seeded rng.
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x51);
            (0..n)
                .map(|_| {
                    let v = &base[rng.gen_range(0..base.len())];
                    (0..dim)
                        .map(|d| v[d] + 0.05 * (rng.gen_range(-1.0f32..1.0)))
                        .collect()
                })
                .collect()
        }
    }
}

fn make_insert_vectors(spec: &WorkloadSpec, base: &[Vec<f32>], dim: usize, count: usize) -> Vec<Vec<f32>> {
    match &spec.dataset {
        DatasetSpec::Synthetic {
            dim: sdim,
            clusters,
            seed,
            ..
        } => synthetic_mixture(count, *sdim, *clusters, *seed, 2),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x1A);
            (0..count)
                .map(|_| {
                    let v = &base[rng.gen_range(0..base.len())];
                    (0..dim)
                        .map(|d| v[d] + 0.05 * (rng.gen_range(-1.0f32..1.0)))
                        .collect()
                })
                .collect()
        }
    }
}

fn make_plans(spec: &WorkloadSpec, base: &[Vec<f32>], dim: usize) -> Result<Vec<PhasePlan>> {
    if spec.update_threads == 0 {
        return Ok(vec![PhasePlan {
            name: "search",
            ops: Vec::new(),
            query_target: Some(spec.search_queries),
        }]);
    }
    if let Some(ops) = &spec.updates {
        return Ok(vec![PhasePlan {
            name: "update",
            ops: ops.clone(),
            query_target: None,
        }]);
    }
    let n = base.len();
    let delete_count = (n as f64 * spec.delete_fraction).floor() as usize;
    let insert_count = (n as f64 * spec.insert_fraction).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xDE1);
    let delete_ids: Vec<VectorId> = rand::seq::index::sample(&mut rng, n, delete_count.min(n))
        .into_iter()
        .map(|i| VectorId(i as u32))
        .collect();
    let inserts = make_insert_vectors(spec, base, dim, insert_count);

    let delete_plan = PhasePlan {
        name: "delete",
        // The whole delete batch is one op: one graph scan repairs everything.
        ops: if delete_ids.is_empty() {
            Vec::new()
        } else {
            vec![UpdateOp::Delete(delete_ids)]
        },
        query_target: None,
    };
    let insert_plan = PhasePlan {
        name: "insert",
        ops: inserts.into_iter().map(UpdateOp::Insert).collect(),
        query_target: None,
    };
    let mut plans = match spec.phase_order {
        PhaseOrder::DeleteFirst => vec![delete_plan, insert_plan],
        PhaseOrder::InsertFirst => vec![insert_plan, delete_plan],
    };
    plans.retain(|p| !p.ops.is_empty());
    Ok(plans)
}

fn build_index(spec: &WorkloadSpec, base: &[Vec<f32>]) -> Result<Index> {
    let insert_head = (base.len() as f64 * spec.insert_fraction).ceil() as usize
        + spec.updates.as_ref().map_or(0, |ops| ops.len());
    let cfg = IndexConfig {
        dim: base[0].len(),
        r: spec.index.r,
        l_build: spec.index.l_build,
        alpha_prune: spec.index.alpha_prune,
        record_align: spec.index.record_align,
        entry_point: VectorId(0),
        capacity: base.len() + insert_head + 16,
        quantizer_bits: spec.index.quantizer_bits,
        metric: Default::default(),
    };
    Index::build(base, cfg)
}

fn run_variant(
    spec: &WorkloadSpec,
    base: &[Vec<f32>],
    query_pool: &Arc<Vec<Vec<f32>>>,
    plans: &[PhasePlan],
    forced_zero: bool,
) -> Result<VariantRaw> {
    let mut device_profile = spec.device.clone();
    device_profile.seed = spec.seed;

    let mut tempdir = None;
    let mut persist_paths = None;
    let (index, device): (Arc<Index>, Arc<dyn BlockDevice>) = match spec.device_kind {
        DeviceKind::Sim => {
            let index = Arc::new(build_index(spec, base)?);
            let device = SimDevice::new(&device_profile, Arc::clone(&index) as _)?;
            (index, Arc::new(device))
        }
        DeviceKind::File => {
            let dir = match &spec.index_dir {
                Some(d) => {
                    std::fs::create_dir_all(d)?;
                    d.clone()
                }
                None => {
                    let t = tempfile::tempdir()?;
                    let p = t.path().to_path_buf();
                    tempdir = Some(t);
                    p
                }
            };
            let index_path = dir.join("index.lios");
            let sidecar_path = dir.join("index.cvq");
            let built = build_index(spec, base)?;
            built.save(&index_path, &sidecar_path)?;
            let insert_head = built.capacity() - built.allocated() as usize;
            drop(built);
            let index = Arc::new(Index::load(
                &index_path,
                &sidecar_path,
                LoadOptions {
                    backing: Backing::WriteThrough,
                    capacity_headroom: insert_head,
                    l_build: spec.index.l_build,
                    alpha_prune: spec.index.alpha_prune,
                },
            )?);
            let device = FileDevice::open(&index_path, 4, device_profile.queue_depth)?;
            persist_paths = Some((index_path, sidecar_path));
            (index, Arc::new(device))
        }
    };

    let mut budget_cfg = spec.budget.clone();
    budget_cfg.theta = spec.theta;
    let mut tuner_cfg = spec.tuner.clone();
    tuner_cfg.theta = spec.theta;
    let budgets = Arc::new(BudgetTable::new(budget_cfg)?);
    let tuner = Arc::new(if forced_zero {
        Tuner::forced_zero(tuner_cfg)?
    } else {
        Tuner::new(tuner_cfg)?
    });
    let engine = Arc::new(UpdateEngine::new(Arc::clone(&index), spec.costs.clone()));

    let ctx = VariantCtx {
        index: Arc::clone(&index),
        device,
        engine: Arc::clone(&engine),
        budgets,
        tuner: Arc::clone(&tuner),
        params: spec.query.params(),
        costs: spec.costs.clone(),
        query_pool: Arc::clone(query_pool),
        search_threads: spec.search_threads,
        update_threads: spec.update_threads,
        virtual_time: spec.virtual_time,
    };

    let mut phases = Vec::new();
    for plan in plans {
        phases.push(run_phase(&ctx, plan)?);
    }

    let recall = recall_pass(spec, &ctx)?;
    // Record writes went through individually; a final whole-file rewrite
    // persists the header, count and tombstone region.
    if let Some((index_path, sidecar_path)) = &persist_paths {
        index.save(index_path, sidecar_path)?;
    }
    Ok(VariantRaw {
        phases,
        recall,
        tuner_trace: tuner.trace(),
        ops: engine.op_log(),
        failed_ops: engine.failed_ops(),
        index,
        _tempdir: tempdir,
    })
}

fn run_phase(ctx: &VariantCtx, plan: &PhasePlan) -> Result<PhaseRaw> {
    let stop = Arc::new(AtomicBool::new(false));
    let submitted = Arc::new(AtomicUsize::new(0));
    let drain_at: Arc<Mutex<Option<Duration>>> = Arc::new(Mutex::new(None));
    let query_counter = Arc::new(AtomicUsize::new(0));
    let search_slots: Arc<Mutex<Vec<Option<ThreadLocalStats>>>> =
        Arc::new(Mutex::new(vec![None; ctx.search_threads]));
    let submit_errors = Arc::new(AtomicUsize::new(0));
    let total_ops = plan.ops.len();
    let update_vectors: usize = plan
        .ops
        .iter()
        .map(|op| match op {
            UpdateOp::Insert(_) => 1,
            UpdateOp::Delete(ids) => ids.len(),
        })
        .sum();

    let mut workers: Vec<Box<dyn FnOnce(&dyn ThreadEnv) + Send>> = Vec::new();
    for tid in 0..ctx.search_threads {
        let index = Arc::clone(&ctx.index);
        let device = Arc::clone(&ctx.device);
        let engine = Arc::clone(&ctx.engine);
        let budgets = Arc::clone(&ctx.budgets);
        let tuner = Arc::clone(&ctx.tuner);
        let pool = Arc::clone(&ctx.query_pool);
        let stop = Arc::clone(&stop);
        let counter = Arc::clone(&query_counter);
        let slots = Arc::clone(&search_slots);
        let params = ctx.params;
        let costs = ctx.costs.clone();
        let stride = ctx.search_threads;
        let query_target = plan.query_target;
        workers.push(Box::new(move |env: &dyn ThreadEnv| {
            let mut handle = match device.open_handle(tid as u64) {
                Ok(h) => h,
                Err(_) => return,
            };
            let mut hook = CoexecHook::new(engine, budgets, Arc::clone(&tuner));
            let mut local = ThreadLocalStats::default();
            let mut qi = tid;
            loop {
                match query_target {
                    Some(target) => {
                        if counter.fetch_add(1, Ordering::AcqRel) >= target {
                            break;
                        }
                    }
                    None => {
                        if stop.load(Ordering::Acquire) {
                            break;
                        }
                    }
                }
                let q = &pool[qi % pool.len()];
                qi += stride;
                match beam_search(
                    &index,
                    handle.as_mut(),
                    q,
                    &params,
                    Some(&mut hook),
                    env,
                    &costs,
                ) {
                    Ok((_, stats)) => {
                        tuner.observe_query(stats.latency);
                        local.queries += 1;
                        local.latencies_us.push(as_micros_f64(stats.latency));
                        for s in &stats.idle {
                            local.idle.push((s.batch_size, as_micros_f64(s.duration)));
                        }
                        local.io += stats.io_count as u64;
                        local.hops += stats.hops as u64;
                        local.slices += stats.slices_run as u64;
                    }
                    Err(_) => {
                        tuner.observe_error();
                        local.errors += 1;
                    }
                }
            }
            local.end_time = env.now();
            slots.lock().unwrap()[tid] = Some(local);
        }));
    }

    // Update producers: submit this phase's ops up front (saturation), then
    // execute tasks continuously until the drain is detected.
    let n_update = if plan.ops.is_empty() { 0 } else { ctx.update_threads };
    for utid in 0..n_update {
        let my_ops: Vec<UpdateOp> = plan
            .ops
            .iter()
            .enumerate()
            .filter(|(i, _)| i % ctx.update_threads == utid)
            .map(|(_, op)| op.clone())
            .collect();
        let engine = Arc::clone(&ctx.engine);
        let stop = Arc::clone(&stop);
        let submitted = Arc::clone(&submitted);
        let drain_at = Arc::clone(&drain_at);
        let submit_errors = Arc::clone(&submit_errors);
        workers.push(Box::new(move |env: &dyn ThreadEnv| {
            let mine = my_ops.len();
            for op in my_ops {
                if engine.submit(op, env).is_err() {
                    submit_errors.fetch_add(1, Ordering::AcqRel);
                }
            }
            submitted.fetch_add(mine, Ordering::AcqRel);
            loop {
                if stop.load(Ordering::Acquire) {
                    break;
                }
                let run = engine.run_slice(Duration::from_millis(2), env);
                if !run.ran {
                    if submitted.load(Ordering::Acquire) >= total_ops
                        && engine.pending_count() == 0
                    {
                        if !stop.swap(true, Ordering::AcqRel) {
                            *drain_at.lock().unwrap() = Some(env.now());
                        }
                        break;
                    }
                    // Idle poll tick so the virtual clock advances.
                    env.charge(Duration::from_micros(5));
                    env.checkpoint();
                }
            }
        }));
    }

    run_phase_workers(ctx.virtual_time, workers);

    let slots = Arc::try_unwrap(search_slots)
        .map_err(|_| Error::Device("search worker slot leak".into()))?
        .into_inner()
        .unwrap();
    let mut raw = PhaseRaw {
        name: plan.name.to_string(),
        update_vectors,
        submit_errors: submit_errors.load(Ordering::Acquire),
        ..PhaseRaw::default()
    };
    let mut latest = Duration::ZERO;
    for slot in slots.into_iter().flatten() {
        raw.latencies_us.extend(slot.latencies_us);
        raw.idle.extend(slot.idle);
        raw.io += slot.io;
        raw.hops += slot.hops;
        raw.slices += slot.slices;
        raw.errors += slot.errors;
        raw.queries += slot.queries;
        latest = latest.max(slot.end_time);
    }
    raw.duration = drain_at.lock().unwrap().unwrap_or(latest);
    Ok(raw)
}

fn run_phase_workers(virtual_time: bool, workers: Vec<Box<dyn FnOnce(&dyn ThreadEnv) + Send>>) {
    if virtual_time {
        let adapted: Vec<Box<dyn FnOnce(&VirtualThread) + Send>> = workers
            .into_iter()
            .map(|f| {
                Box::new(move |env: &VirtualThread| f(env)) as Box<dyn FnOnce(&VirtualThread) + Send>
            })
            .collect();
        VirtualExecutor::run(adapted);
    } else {
        std::thread::scope(|s| {
            let env = WallEnv::new();
            for f in workers {
                let env = env.clone();
                s.spawn(move || f(&env));
            }
        });
    }
}

/// Exact-recall evaluation over the final graph: ground truth reflects
/// tombstones (only live ids on both sides).
fn recall_pass(spec: &WorkloadSpec, ctx: &VariantCtx) -> Result<Option<f64>> {
    if spec.recall_queries == 0 || ctx.index.live_count() == 0 {
        return Ok(None);
    }
    let live: Vec<(VectorId, Vec<f32>)> = ctx
        .index
        .live_ids()
        .into_iter()
        .map(|id| ctx.index.vector(id).map(|v| (id, v)))
        .collect::<Result<_>>()?;
    let queries: Vec<Vec<f32>> = ctx.query_pool[..spec.recall_queries.min(ctx.query_pool.len())].to_vec();
    let truth = ground_truth(&live, &queries, spec.query.k);

    let mut handle = ctx.device.open_handle(1_000_000)?;
    let virtual_env = ManualClock::new();
    let wall_env = WallEnv::new();
    let env: &dyn ThreadEnv = if spec.device_kind == DeviceKind::Sim {
        &virtual_env
    } else {
        &wall_env
    };
    let mut got = Vec::with_capacity(queries.len());
    for q in &queries {
        let (results, _) = beam_search(
            &ctx.index,
            handle.as_mut(),
            q,
            &ctx.params,
            None,
            env,
            &ctx.costs,
        )?;
        got.push(results.into_iter().map(|(id, _)| id).collect::<Vec<_>>());
    }
    Ok(Some(recall_at_k(&truth, &got, spec.query.k)))
}

fn summarize_phase(raw: &PhaseRaw, baseline: Option<&PhaseRaw>) -> PhaseMetrics {
    let duration_us = as_micros_f64(raw.duration);
    let latency = LatencySummary::from_samples(&raw.latencies_us);
    let total_latency: f64 = raw.latencies_us.iter().sum();
    let total_idle: f64 = raw.idle.iter().map(|(_, us)| us).sum();
    let stall_count = raw.idle.len();
    PhaseMetrics {
        duration_us,
        queries: raw.queries,
        qps: if duration_us > 0.0 {
            raw.queries as f64 / (duration_us / 1e6)
        } else {
            0.0
        },
        latency,
        update_vectors: raw.update_vectors,
        update_throughput_per_s: if raw.update_vectors > 0 && duration_us > 0.0 {
            Some(raw.update_vectors as f64 / (duration_us / 1e6))
        } else {
            None
        },
        idle_ratio: if total_latency > 0.0 {
            (total_idle / total_latency).clamp(0.0, 1.0)
        } else {
            0.0
        },
        mean_stall_us: if stall_count > 0 {
            Some(total_idle / stall_count as f64)
        } else {
            None
        },
        stall_samples: stall_count,
        io_per_query: if raw.queries > 0 {
            raw.io as f64 / raw.queries as f64
        } else {
            0.0
        },
        slices_run: raw.slices,
        search_errors: raw.errors,
        speedup_vs_baseline: baseline.map(|b| as_micros_f64(b.duration) / duration_us.max(1e-9)),
        mean_latency_degradation: baseline.and_then(|b| {
            let co_mean = mean(&raw.latencies_us)?;
            let base_mean = mean(&b.latencies_us)?;
            Some(co_mean / base_mean - 1.0)
        }),
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

fn assemble_report(
    spec: &WorkloadSpec,
    base: &[Vec<f32>],
    dim: usize,
    co: &VariantRaw,
    baseline: Option<&VariantRaw>,
    started: Instant,
) -> MetricsReport {
    let mut report = MetricsReport {
        dataset: spec.dataset.describe(),
        vectors: base.len(),
        dim,
        theta: spec.theta,
        seed: spec.seed,
        k: spec.query.k,
        virtual_time: spec.virtual_time,
        baseline_only: spec.baseline_only,
        wall_seconds: if spec.virtual_time {
            None
        } else {
            Some(started.elapsed().as_secs_f64())
        },
        recall_at_k: co.recall,
        failed_ops: co.failed_ops + co.phases.iter().map(|p| p.submit_errors).sum::<usize>(),
        ..MetricsReport::default()
    };
    for raw in &co.phases {
        let paired = baseline.and_then(|b| b.phases.iter().find(|p| p.name == raw.name));
        let metrics = summarize_phase(raw, paired);
        match raw.name.as_str() {
            "delete" => report.delete_phase = Some(metrics),
            "insert" => report.insert_phase = Some(metrics),
            "update" => report.update_phase = Some(metrics),
            _ => report.search_phase = Some(metrics),
        }
    }
    report
}
