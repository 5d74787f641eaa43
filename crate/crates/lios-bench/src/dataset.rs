//! Dataset ingestion: fvecs/bvecs containers and seeded synthetic mixtures,
//! plus the exact ground-truth oracle for recall accounting.

use std::path::{Path, PathBuf};

use lios::graph_index::VectorId;
use lios::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    Fvecs {
        path: PathBuf,
    },
    Bvecs {
        path: PathBuf,
    },
    Synthetic {
        n: usize,
        dim: usize,
        clusters: usize,
        seed: u64,
    },
}

impl DatasetSpec {
    pub fn describe(&self) -> String {
        match self {
            DatasetSpec::Fvecs { path } => format!("fvecs:{}", path.display()),
            DatasetSpec::Bvecs { path } => format!("bvecs:{}", path.display()),
            DatasetSpec::Synthetic {
                n,
                dim,
                clusters,
                seed,
            } => format!("synthetic(n={n},dim={dim},clusters={clusters},seed={seed})"),
        }
    }
}

/// Load base vectors according to the spec. File formats are the standard
/// little-endian containers: fvecs repeats `{dim: u32, dim * f32}`, bvecs
/// repeats `{dim: u32, dim * u8}` promoted to floats.
pub fn load_vectors(spec: &DatasetSpec) -> Result<Vec<Vec<f32>>> {
    match spec {
        DatasetSpec::Fvecs { path } => parse_fvecs(&std::fs::read(path)?),
        DatasetSpec::Bvecs { path } => parse_bvecs(&std::fs::read(path)?),
        DatasetSpec::Synthetic {
            n,
            dim,
            clusters,
            seed,
        } => Ok(synthetic_mixture(*n, *dim, *clusters, *seed, 0)),
    }
}

pub fn parse_fvecs(bytes: &[u8]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::new();
    let mut off = 0usize;
    let mut dim: Option<usize> = None;
    while off < bytes.len() {
        if off + 4 > bytes.len() {
            return Err(Error::Format("fvecs: truncated dimension header".into()));
        }
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        if d == 0 || d > 1 << 20 {
            return Err(Error::Format(format!("fvecs: implausible dimension {d}")));
        }
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::Format(format!(
                    "fvecs: inconsistent dimension {d}, expected {expected}"
                )));
            }
            _ => {}
        }
        if off + d * 4 > bytes.len() {
            return Err(Error::Format("fvecs: truncated payload".into()));
        }
        let mut v = Vec::with_capacity(d);
        for k in 0..d {
            v.push(f32::from_le_bytes(
                bytes[off + k * 4..off + k * 4 + 4].try_into().unwrap(),
            ));
        }
        off += d * 4;
        out.push(v);
    }
    Ok(out)
}

pub fn parse_bvecs(bytes: &[u8]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::new();
    let mut off = 0usize;
    let mut dim: Option<usize> = None;
    while off < bytes.len() {
        if off + 4 > bytes.len() {
            return Err(Error::Format("bvecs: truncated dimension header".into()));
        }
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        if d == 0 || d > 1 << 20 {
            return Err(Error::Format(format!("bvecs: implausible dimension {d}")));
        }
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::Format(format!(
                    "bvecs: inconsistent dimension {d}, expected {expected}"
                )));
            }
            _ => {}
        }
        if off + d > bytes.len() {
            return Err(Error::Format("bvecs: truncated payload".into()));
        }
        out.push(bytes[off..off + d].iter().map(|&b| b as f32).collect());
        off += d;
    }
    Ok(out)
}

/// Serialize vectors as fvecs (used by the CLI and tests).
pub fn write_fvecs(path: &Path, vectors: &[Vec<f32>]) -> Result<()> {
    let mut bytes = Vec::new();
    for v in vectors {
        bytes.extend_from_slice(&(v.len() as u32).to_le_bytes());
        for &c in v {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Gaussian mixture: cluster centers depend only on `(seed, clusters, dim)`,
/// the point stream on `(seed, stream)`. Streams 0/1/2 are the conventional
/// base/query/insert draws, so all three share the same cluster structure.
pub fn synthetic_mixture(
    n: usize,
    dim: usize,
    clusters: usize,
    seed: u64,
    stream: u64,
) -> Vec<Vec<f32>> {
    let clusters = clusters.max(1);
    let mut crng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1u64.wrapping_mul(clusters as u64 + 1));
    let centers: Vec<Vec<f64>> = (0..clusters)
        .map(|_| (0..dim).map(|_| 3.0 * gaussian(&mut crng)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9)));
    (0..n)
        .map(|_| {
            let c = &centers[rng.gen_range(0..clusters)];
            (0..dim)
                .map(|d| (c[d] + 0.5 * gaussian(&mut rng)) as f32)
                .collect()
        })
        .collect()
}

/// Exact L2 top-K ids per query over `(id, vector)` pairs; ties break to the
/// lower id. The recall oracle — callers pass only live vectors so deleted
/// ids are excluded from both sides of the comparison.
pub fn ground_truth(
    base: &[(VectorId, Vec<f32>)],
    queries: &[Vec<f32>],
    k: usize,
) -> Vec<Vec<VectorId>> {
    queries
        .iter()
        .map(|q| {
            let mut order: Vec<(f32, VectorId)> = base
                .iter()
                .map(|(id, v)| (l2(q, v), *id))
                .collect();
            order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            order.into_iter().take(k).map(|(_, id)| id).collect()
        })
        .collect()
}

fn l2(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0f64;
    for i in 0..a.len() {
        let d = (a[i] - b[i]) as f64;
        acc += d * d;
    }
    acc.sqrt() as f32
}

/// Fraction of true top-K ids present in the returned top-K.
pub fn recall_at_k(truth: &[Vec<VectorId>], got: &[Vec<VectorId>], k: usize) -> f64 {
    assert_eq!(truth.len(), got.len());
    if truth.is_empty() || k == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (t, g) in truth.iter().zip(got.iter()) {
        let tset: std::collections::HashSet<&VectorId> = t.iter().take(k).collect();
        total += tset.len();
        hits += g.iter().take(k).filter(|id| tset.contains(id)).count();
    }
    hits as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fvecs_single_vector() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        assert_eq!(parse_fvecs(&bytes).unwrap(), vec![vec![1.0, 2.0]]);
    }

    #[test]
    fn fvecs_truncation_and_dim_errors() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        assert!(parse_fvecs(&bytes).is_err(), "truncated payload");

        let mut bytes = Vec::new();
        for dim in [2u32, 3u32] {
            bytes.extend_from_slice(&dim.to_le_bytes());
            for _ in 0..dim {
                bytes.extend_from_slice(&0.5f32.to_le_bytes());
            }
        }
        assert!(parse_fvecs(&bytes).is_err(), "inconsistent dimension");
    }

    #[test]
    fn bvecs_promotes_bytes() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8, 128, 255]);
        assert_eq!(parse_bvecs(&bytes).unwrap(), vec![vec![0.0, 128.0, 255.0]]);
        assert!(parse_bvecs(&bytes[..5]).is_err());
    }

    #[test]
    fn fvecs_roundtrip_through_writer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.fvecs");
        let vectors = vec![vec![1.0f32, -2.0], vec![0.25, 7.5]];
        write_fvecs(&path, &vectors).unwrap();
        let spec = DatasetSpec::Fvecs { path };
        assert_eq!(load_vectors(&spec).unwrap(), vectors);
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let a = synthetic_mixture(1000, 16, 8, 42, 0);
        let b = synthetic_mixture(1000, 16, 8, 42, 0);
        assert_eq!(a, b);
        assert_eq!(a.len(), 1000);
        assert!(a.iter().all(|v| v.len() == 16));
        // Different streams share centers but differ pointwise.
        let q = synthetic_mixture(1000, 16, 8, 42, 1);
        assert_ne!(a, q);
    }

    #[test]
    fn ground_truth_identity_and_full_k() {
        let base: Vec<(VectorId, Vec<f32>)> = vec![
            (VectorId(0), vec![0.0, 0.0]),
            (VectorId(1), vec![1.0, 0.0]),
            (VectorId(2), vec![0.0, 2.0]),
        ];
        let queries = vec![vec![1.0, 0.0]];
        let gt = ground_truth(&base, &queries, 1);
        assert_eq!(gt, vec![vec![VectorId(1)]]);
        // K = n returns everything sorted by distance.
        let gt = ground_truth(&base, &queries, 3);
        assert_eq!(gt, vec![vec![VectorId(1), VectorId(0), VectorId(2)]]);
    }

    /// Independent quadratic-scan oracle using a bounded max-heap. Keys are
    /// `(distance bits, id)`: the bit pattern of a non-negative f32 orders the
    /// same as the float, so evicting the heap maximum keeps the k smallest
    /// by `(distance, id)` — lower ids win distance ties.
    fn heap_ground_truth(
        base: &[(VectorId, Vec<f32>)],
        queries: &[Vec<f32>],
        k: usize,
    ) -> Vec<Vec<VectorId>> {
        use std::collections::BinaryHeap;
        queries
            .iter()
            .map(|q| {
                let mut heap: BinaryHeap<(u32, u32)> = BinaryHeap::new();
                for (id, v) in base {
                    let key = (l2(q, v).to_bits(), id.0);
                    if heap.len() < k {
                        heap.push(key);
                    } else if let Some(&top) = heap.peek() {
                        if key < top {
                            heap.pop();
                            heap.push(key);
                        }
                    }
                }
                let mut out = heap.into_vec();
                out.sort_unstable();
                out.into_iter().map(|(_, id)| VectorId(id)).collect()
            })
            .collect()
    }

    #[test]
    fn ground_truth_matches_independent_heap_scan() {
        let base_vecs = synthetic_mixture(1000, 8, 4, 7, 0);
        let base: Vec<(VectorId, Vec<f32>)> = base_vecs
            .into_iter()
            .enumerate()
            .map(|(i, v)| (VectorId(i as u32), v))
            .collect();
        let queries = synthetic_mixture(100, 8, 4, 7, 1);
        let a = ground_truth(&base, &queries, 10);
        let b = heap_ground_truth(&base, &queries, 10);
        assert_eq!(a, b);
    }

    #[test]
    fn recall_computation() {
        let truth = vec![vec![VectorId(1), VectorId(2)], vec![VectorId(3), VectorId(4)]];
        let got = vec![vec![VectorId(1), VectorId(9)], vec![VectorId(4), VectorId(3)]];
        assert_eq!(recall_at_k(&truth, &got, 2), 0.75);
    }
}
