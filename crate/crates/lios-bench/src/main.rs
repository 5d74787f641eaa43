//! Command-line benchmark harness: `build` an index, `search` it, or run a
//! full concurrent search/update `bench` with paired baseline and report
//! emission. Exits 0 only on full completion.

use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lios::budgeting::BudgetMode;
use lios::graph_index::{Index, IndexConfig, LoadOptions, VectorId};
use lios::io_layer::{BlockDevice, DeviceProfile, FileDevice, SimDevice};
use lios::search::{beam_search, QueryParams};
use lios::time::{CpuCostModel, ManualClock, ThreadEnv, WallEnv};
use lios::update_engine::parse_workload;
use lios::{Error, Result};
use lios_bench::dataset::{ground_truth, load_vectors, recall_at_k, synthetic_mixture, DatasetSpec};
use lios_bench::report::{emit_report, LatencySummary};
use lios_bench::workload::{
    run_workload, DeviceKind, IndexParams, PhaseOrder, QuerySpec, WorkloadSpec,
};

#[derive(Parser)]
#[command(name = "lios-bench", about = "Graph-ANNS search/update co-execution benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an index from a dataset and persist it.
    Build(BuildArgs),
    /// Query a persisted index and report latency and recall.
    Search(SearchArgs),
    /// Run the mixed search/update workload with metrics reporting.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset file; .fvecs or .bvecs by extension.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Synthetic dataset as `n,dim,clusters`.
    #[arg(long, value_name = "N,DIM,CLUSTERS")]
    synthetic: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DataArgs {
    fn spec(&self) -> Result<DatasetSpec> {
        match (&self.dataset, &self.synthetic) {
            (Some(path), None) => match path.extension().and_then(|e| e.to_str()) {
                Some("fvecs") => Ok(DatasetSpec::Fvecs { path: path.clone() }),
                Some("bvecs") => Ok(DatasetSpec::Bvecs { path: path.clone() }),
                other => Err(Error::InvalidConfig(format!(
                    "unsupported dataset extension {other:?} (want .fvecs or .bvecs)"
                ))),
            },
            (None, Some(s)) => {
                let parts: Vec<&str> = s.split(',').collect();
                if parts.len() != 3 {
                    return Err(Error::InvalidConfig(
                        "--synthetic wants n,dim,clusters".into(),
                    ));
                }
                let parse = |p: &str| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::InvalidConfig(format!("bad synthetic field '{p}'")))
                };
                Ok(DatasetSpec::Synthetic {
                    n: parse(parts[0])?,
                    dim: parse(parts[1])?,
                    clusters: parse(parts[2])?,
                    seed: self.seed,
                })
            }
            (None, None) => Err(Error::InvalidConfig(
                "one of --dataset or --synthetic is required".into(),
            )),
            (Some(_), Some(_)) => Err(Error::InvalidConfig(
                "--dataset and --synthetic are mutually exclusive".into(),
            )),
        }
    }
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for index.lios and index.cvq.
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "R", default_value_t = 16)]
    r: usize,
    /// Build-time candidate pool size.
    #[arg(long = "L-build", default_value_t = 32)]
    l_build: usize,
    #[arg(long, default_value_t = 1.2)]
    alpha: f32,
    #[arg(long, default_value_t = 4096)]
    align: usize,
    #[arg(long, default_value_t = 8)]
    bits: u8,
    /// Extra record slots reserved for later inserts.
    #[arg(long, default_value_t = 0)]
    headroom: usize,
}

#[derive(Args)]
struct SearchArgs {
    /// Directory holding index.lios and index.cvq.
    #[arg(long)]
    index: PathBuf,
    #[arg(long = "K", default_value_t = 10)]
    k: usize,
    #[arg(long = "L", default_value_t = 100)]
    l: usize,
    #[arg(long = "W", default_value_t = 4)]
    w: usize,
    /// Query vectors (fvecs). Without it, queries are synthetic.
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    num_queries: usize,
    #[arg(long, value_enum, default_value_t = DeviceArg::Sim)]
    device: DeviceArg,
    /// JSON file with the simulated-device profile.
    #[arg(long)]
    device_profile: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum DeviceArg {
    Sim,
    File,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    PerBatch,
    KSparse,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0.05)]
    theta: f64,
    #[arg(long, default_value_t = 8)]
    search_threads: usize,
    #[arg(long, default_value_t = 2)]
    update_threads: usize,
    #[arg(long, default_value_t = 0.05)]
    delete_fraction: f64,
    #[arg(long, default_value_t = 0.05)]
    insert_fraction: f64,
    #[arg(long = "R", default_value_t = 16)]
    r: usize,
    #[arg(long = "L", default_value_t = 100)]
    l: usize,
    #[arg(long = "W", default_value_t = 4)]
    w: usize,
    #[arg(long = "K", default_value_t = 10)]
    k: usize,
    #[arg(long = "L-build", default_value_t = 32)]
    l_build: usize,
    #[arg(long, default_value_t = 1.2)]
    alpha: f32,
    #[arg(long, default_value_t = 4096)]
    align: usize,
    #[arg(long, value_enum, default_value_t = DeviceArg::Sim)]
    device: DeviceArg,
    #[arg(long)]
    device_profile: Option<PathBuf>,
    /// Budgeting mode: schedule every interval per batch size, or only every
    /// K-th interval.
    #[arg(long, value_enum, default_value_t = ModeArg::PerBatch)]
    mode: ModeArg,
    #[arg(long)]
    k_sparse: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Force utilization to zero (no co-execution); single unpaired run.
    #[arg(long, default_value_t = false)]
    baseline: bool,
    /// Run on the deterministic virtual clock (simulated device only).
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    virtual_time: bool,
    #[arg(long, value_enum, default_value_t = PhaseOrderArg::DeleteFirst)]
    phase_order: PhaseOrderArg,
    /// Newline-delimited update ops (`I <components...>` | `D <id>`);
    /// replaces the generated delete/insert phases.
    #[arg(long)]
    updates: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    recall_queries: usize,
    #[arg(long, default_value_t = 2000)]
    search_queries: usize,
    #[arg(long, default_value_t = 100)]
    epoch_queries: usize,
    /// Directory for index files in file-device mode.
    #[arg(long)]
    index_dir: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum PhaseOrderArg {
    DeleteFirst,
    InsertFirst,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Build(args) => run_build(args),
        Command::Search(args) => run_search(args),
        Command::Bench(args) => run_bench(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn load_profile(path: &Option<PathBuf>) -> Result<DeviceProfile> {
    match path {
        None => Ok(DeviceProfile::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("device profile {}: {e}", p.display())))
        }
    }
}

fn run_build(args: BuildArgs) -> Result<()> {
    let spec = args.data.spec()?;
    let vectors = load_vectors(&spec)?;
    if vectors.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = vectors[0].len();
    let cfg = IndexConfig {
        dim,
        r: args.r,
        l_build: args.l_build,
        alpha_prune: args.alpha,
        record_align: args.align,
        entry_point: VectorId(0),
        capacity: vectors.len() + args.headroom,
        quantizer_bits: args.bits,
        metric: Default::default(),
    };
    let started = std::time::Instant::now();
    let index = Index::build(&vectors, cfg)?;
    std::fs::create_dir_all(&args.out)?;
    index.save(&args.out.join("index.lios"), &args.out.join("index.cvq"))?;
    let reachable = index.reachable_from_entry().count_ones();
    println!(
        "built {} vectors (dim {dim}, R {}) in {:.2}s; entry {} reaches {}/{} nodes; saved to {}",
        vectors.len(),
        args.r,
        started.elapsed().as_secs_f64(),
        index.entry_point(),
        reachable,
        vectors.len(),
        args.out.display()
    );
    Ok(())
}

fn run_search(args: SearchArgs) -> Result<()> {
    let index_path = args.index.join("index.lios");
    let sidecar_path = args.index.join("index.cvq");
    let index = Arc::new(Index::load(
        &index_path,
        &sidecar_path,
        LoadOptions::default(),
    )?);
    let dim = index.dim();
    let queries: Vec<Vec<f32>> = match &args.queries {
        Some(path) => {
            let spec = DatasetSpec::Fvecs { path: path.clone() };
            load_vectors(&spec)?
        }
        None => synthetic_mixture(args.num_queries, dim, 8, args.seed, 1),
    };
    let queries = &queries[..queries.len().min(args.num_queries)];

    let mut profile = load_profile(&args.device_profile)?;
    profile.seed = args.seed;
    let manual = ManualClock::new();
    let wall = WallEnv::new();
    let (device, env): (Arc<dyn BlockDevice>, &dyn ThreadEnv) = match args.device {
        DeviceArg::Sim => (
            Arc::new(SimDevice::new(&profile, Arc::clone(&index) as _)?),
            &manual,
        ),
        DeviceArg::File => (
            Arc::new(FileDevice::open(&index_path, 4, profile.queue_depth)?),
            &wall,
        ),
    };
    let mut handle = device.open_handle(0)?;
    let params = QueryParams::new(args.k, args.l, args.w);
    let costs = CpuCostModel::default();

    let live: Vec<(VectorId, Vec<f32>)> = index
        .live_ids()
        .into_iter()
        .map(|id| index.vector(id).map(|v| (id, v)))
        .collect::<Result<_>>()?;
    let truth = ground_truth(&live, queries, args.k);

    let mut latencies = Vec::new();
    let mut got = Vec::new();
    for q in queries {
        let (results, stats) = beam_search(&index, handle.as_mut(), q, &params, None, env, &costs)?;
        latencies.push(stats.latency.as_secs_f64() * 1e6);
        got.push(results.into_iter().map(|(id, _)| id).collect::<Vec<_>>());
    }
    let recall = recall_at_k(&truth, &got, args.k);
    let summary = LatencySummary::from_samples(&latencies);
    match &summary {
        Some(s) => println!(
            "{} queries: recall@{} = {:.4}, latency mean {:.1}us (ci95 {:.2}), p95 {:.1}us, p99 {:.1}us",
            queries.len(),
            args.k,
            recall,
            s.mean_us,
            s.ci95_mean_us,
            s.p95_us,
            s.p99_us
        ),
        None => println!("no queries run"),
    }
    if let Some(path) = &args.report {
        let report = lios_bench::report::MetricsReport {
            dataset: format!("index:{}", args.index.display()),
            vectors: index.live_count(),
            dim,
            k: args.k,
            seed: args.seed,
            virtual_time: args.device == DeviceArg::Sim,
            wall_seconds: None,
            recall_at_k: Some(recall),
            search_phase: summary.map(|s| lios_bench::report::PhaseMetrics {
                duration_us: latencies.iter().sum(),
                queries: queries.len(),
                qps: 0.0,
                latency: Some(s),
                update_vectors: 0,
                update_throughput_per_s: None,
                idle_ratio: 0.0,
                mean_stall_us: None,
                stall_samples: 0,
                io_per_query: 0.0,
                slices_run: 0,
                search_errors: 0,
                speedup_vs_baseline: None,
                mean_latency_degradation: None,
            }),
            ..Default::default()
        };
        emit_report(&report, &Default::default(), path)?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let mut profile = load_profile(&args.device_profile)?;
    profile.seed = args.data.seed;
    let updates = match &args.updates {
        Some(path) => Some(parse_workload(&std::fs::read_to_string(path)?)?),
        None => None,
    };
    let mut spec = WorkloadSpec {
        dataset: args.data.spec()?,
        index: IndexParams {
            r: args.r,
            l_build: args.l_build,
            alpha_prune: args.alpha,
            record_align: args.align,
            ..IndexParams::default()
        },
        query: QuerySpec {
            k: args.k,
            l: args.l,
            w: args.w,
        },
        search_threads: args.search_threads,
        update_threads: args.update_threads,
        delete_fraction: args.delete_fraction,
        insert_fraction: args.insert_fraction,
        theta: args.theta,
        device_kind: match args.device {
            DeviceArg::Sim => DeviceKind::Sim,
            DeviceArg::File => DeviceKind::File,
        },
        device: profile,
        seed: args.data.seed,
        recall_queries: args.recall_queries,
        search_queries: args.search_queries,
        phase_order: match args.phase_order {
            PhaseOrderArg::DeleteFirst => PhaseOrder::DeleteFirst,
            PhaseOrderArg::InsertFirst => PhaseOrder::InsertFirst,
        },
        virtual_time: args.virtual_time && args.device == DeviceArg::Sim,
        baseline_only: args.baseline,
        index_dir: args.index_dir.clone(),
        updates,
        ..WorkloadSpec::default()
    };
    spec.budget.mode = match args.mode {
        ModeArg::PerBatch => BudgetMode::PerBatch,
        ModeArg::KSparse => BudgetMode::KSparse,
    };
    if let Some(k) = args.k_sparse {
        spec.budget.k_sparse = k;
    }
    spec.tuner.epoch_queries = args.epoch_queries;

    let out = run_workload(&spec)?;
    print_phase("delete", &out.report.delete_phase);
    print_phase("insert", &out.report.insert_phase);
    print_phase("update", &out.report.update_phase);
    print_phase("search", &out.report.search_phase);
    if let Some(recall) = out.report.recall_at_k {
        println!("recall@{} = {recall:.4}", out.report.k);
    }
    if out.report.failed_ops > 0 {
        return Err(Error::Device(format!(
            "{} update ops failed",
            out.report.failed_ops
        )));
    }
    if let Some(path) = &args.report {
        let written = emit_report(&out.report, &out.artifacts, path)?;
        println!("report written to {}", written[0].display());
    }
    Ok(())
}

fn print_phase(name: &str, metrics: &Option<lios_bench::report::PhaseMetrics>) {
    let Some(m) = metrics else { return };
    let lat = m
        .latency
        .as_ref()
        .map(|l| format!("mean {:.1}us p95 {:.1}us p99 {:.1}us", l.mean_us, l.p95_us, l.p99_us))
        .unwrap_or_else(|| "no samples".into());
    let speedup = m
        .speedup_vs_baseline
        .map(|s| format!(", speedup {s:.2}x"))
        .unwrap_or_default();
    let degr = m
        .mean_latency_degradation
        .map(|d| format!(", degradation {:+.2}%", d * 100.0))
        .unwrap_or_default();
    let upd = m
        .update_throughput_per_s
        .map(|u| format!(", {u:.0} vectors/s"))
        .unwrap_or_default();
    println!(
        "{name}: {:.1}ms, {} queries ({:.0} qps), latency {lat}, idle {:.1}%{upd}{speedup}{degr}",
        m.duration_us / 1e3,
        m.queries,
        m.qps,
        m.idle_ratio * 100.0
    );
}
