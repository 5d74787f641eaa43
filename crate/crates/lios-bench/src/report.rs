//! Metrics assembly and report emission: a JSON document with a stable schema
//! plus companion CSVs (latency samples, tuner trace, idle samples, op log)
//! for external plotting.

use std::io::Write;
use std::path::{Path, PathBuf};

use lios::tuner::TraceRow;
use lios::update_engine::OpRecord;
use lios::{Error, Result};
use serde::{Deserialize, Serialize};

/// Latency summary over one phase; microseconds. The confidence interval is
/// the normal approximation `1.96 * s / sqrt(n)` around the mean.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LatencySummary {
    pub count: usize,
    pub mean_us: f64,
    pub ci95_mean_us: f64,
    pub p95_us: f64,
    pub p99_us: f64,
}

impl LatencySummary {
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let ci = 1.96 * var.sqrt() / (n as f64).sqrt();
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pct = |q: f64| {
            let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
            sorted[rank - 1]
        };
        Some(Self {
            count: n,
            mean_us: mean,
            ci95_mean_us: ci,
            p95_us: pct(0.95),
            p99_us: pct(0.99),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PhaseMetrics {
    /// Phase length: virtual time in virtual-time mode, wall time otherwise.
    pub duration_us: f64,
    pub queries: usize,
    pub qps: f64,
    pub latency: Option<LatencySummary>,
    /// Vectors applied by update ops during this phase.
    pub update_vectors: usize,
    pub update_throughput_per_s: Option<f64>,
    /// Stalled fraction of search time.
    pub idle_ratio: f64,
    pub mean_stall_us: Option<f64>,
    pub stall_samples: usize,
    pub io_per_query: f64,
    pub slices_run: u64,
    pub search_errors: u64,
    /// Baseline-phase duration divided by this phase's duration.
    pub speedup_vs_baseline: Option<f64>,
    /// Mean-latency ratio against the paired baseline, minus one.
    pub mean_latency_degradation: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct MetricsReport {
    pub dataset: String,
    pub vectors: usize,
    pub dim: usize,
    pub theta: f64,
    pub seed: u64,
    pub k: usize,
    pub virtual_time: bool,
    pub baseline_only: bool,
    /// Absent in virtual-time mode (no wall-clock fields there).
    pub wall_seconds: Option<f64>,
    pub delete_phase: Option<PhaseMetrics>,
    pub insert_phase: Option<PhaseMetrics>,
    pub update_phase: Option<PhaseMetrics>,
    pub search_phase: Option<PhaseMetrics>,
    pub recall_at_k: Option<f64>,
    pub failed_ops: usize,
    /// Path of the tuner trace CSV once emitted.
    pub tuner_trace: Option<String>,
}

/// Raw per-phase artifacts retained for CSV emission and assertions.
#[derive(Debug, Clone, Default)]
pub struct PhaseArtifacts {
    pub name: String,
    pub latencies_us: Vec<f64>,
    pub idle_us: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct ReportArtifacts {
    pub phases: Vec<PhaseArtifacts>,
    pub tuner_trace: Vec<TraceRow>,
    pub ops: Vec<OpRecord>,
}

/// Write the JSON report plus companion CSVs next to it. Returns the paths
/// written: `<stem>.json`, `<stem>.latency.csv`, `<stem>.idle.csv`,
/// `<stem>.tuner.csv`, `<stem>.ops.csv`.
pub fn emit_report(
    report: &MetricsReport,
    artifacts: &ReportArtifacts,
    path: &Path,
) -> Result<Vec<PathBuf>> {
    let stem = path.with_extension("");
    let json_path = stem.with_extension("json");
    let latency_path = stem.with_extension("latency.csv");
    let idle_path = stem.with_extension("idle.csv");
    let tuner_path = stem.with_extension("tuner.csv");
    let ops_path = stem.with_extension("ops.csv");

    let mut report = report.clone();
    report.tuner_trace = Some(tuner_path.display().to_string());
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
    std::fs::write(&json_path, json)?;

    let mut latency = std::fs::File::create(&latency_path)?;
    writeln!(latency, "phase,latency_us")?;
    for phase in &artifacts.phases {
        for us in &phase.latencies_us {
            writeln!(latency, "{},{us}", phase.name)?;
        }
    }

    let mut idle = std::fs::File::create(&idle_path)?;
    writeln!(idle, "phase,batch_size,duration_us")?;
    for phase in &artifacts.phases {
        for (batch, us) in &phase.idle_us {
            writeln!(idle, "{},{batch},{us}", phase.name)?;
        }
    }

    let mut tuner = std::fs::File::create(&tuner_path)?;
    writeln!(tuner, "epoch,phase,alpha,ratio")?;
    for row in &artifacts.tuner_trace {
        let ratio = row.ratio.map_or(String::new(), |r| format!("{r}"));
        writeln!(tuner, "{},{},{},{ratio}", row.epoch, row.phase, row.alpha)?;
    }

    let mut ops = std::fs::File::create(&ops_path)?;
    writeln!(ops, "op_id,kind,vectors,enqueued_us,drained_us,failed")?;
    for op in &artifacts.ops {
        let drained = op
            .drained_at
            .map_or(String::new(), |d| format!("{}", d.as_secs_f64() * 1e6));
        writeln!(
            ops,
            "{},{},{},{},{drained},{}",
            op.id.0,
            op.kind,
            op.vectors,
            op.enqueued_at.as_secs_f64() * 1e6,
            op.failed
        )?;
    }

    Ok(vec![json_path, latency_path, idle_path, tuner_path, ops_path])
}

/// Parse a report back; the schema round-trips through its own parser.
pub fn parse_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("report parse: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_matches_hand_computation() {
        // Fixed sample set: mean 30, sample std 15.811..., n = 5.
        let samples = [10.0, 20.0, 30.0, 40.0, 50.0];
        let summary = LatencySummary::from_samples(&samples).unwrap();
        assert_eq!(summary.mean_us, 30.0);
        let s = (1000.0f64 / 4.0).sqrt(); // sum of squared deviations = 1000
        let expected_ci = 1.96 * s / 5.0f64.sqrt();
        assert!((summary.ci95_mean_us - expected_ci).abs() < 1e-12);
        assert_eq!(summary.p95_us, 50.0);
    }

    #[test]
    fn empty_phase_is_none_not_zero() {
        assert!(LatencySummary::from_samples(&[]).is_none());
        let report = MetricsReport::default();
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"delete_phase\":null"));
    }

    #[test]
    fn report_roundtrips_through_its_parser() {
        let dir = tempfile::tempdir().unwrap();
        let report = MetricsReport {
            dataset: "synthetic(n=10,dim=2,clusters=1,seed=0)".into(),
            vectors: 10,
            dim: 2,
            theta: 0.05,
            seed: 7,
            k: 10,
            virtual_time: true,
            wall_seconds: None,
            search_phase: Some(PhaseMetrics {
                duration_us: 1000.0,
                queries: 5,
                qps: 5000.0,
                latency: LatencySummary::from_samples(&[100.0, 200.0]),
                update_vectors: 0,
                update_throughput_per_s: None,
                idle_ratio: 0.5,
                mean_stall_us: Some(90.0),
                stall_samples: 10,
                io_per_query: 12.0,
                slices_run: 0,
                search_errors: 0,
                speedup_vs_baseline: None,
                mean_latency_degradation: None,
            }),
            recall_at_k: Some(0.97),
            ..MetricsReport::default()
        };
        let artifacts = ReportArtifacts {
            phases: vec![PhaseArtifacts {
                name: "search".into(),
                latencies_us: vec![100.0, 200.0],
                idle_us: vec![(4, 90.0)],
            }],
            ..ReportArtifacts::default()
        };
        let path = dir.path().join("report.json");
        let written = emit_report(&report, &artifacts, &path).unwrap();
        assert_eq!(written.len(), 5);
        let back = parse_report(&written[0]).unwrap();
        // The emitted report equals the input except for the trace path.
        let mut expected = report;
        expected.tuner_trace = back.tuner_trace.clone();
        assert_eq!(back, expected);
        // Companion CSVs have headers plus data rows.
        let latency = std::fs::read_to_string(&written[1]).unwrap();
        assert_eq!(latency.lines().count(), 3);
    }
}
