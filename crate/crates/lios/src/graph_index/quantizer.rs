//! In-memory compressed vectors: uniform per-dimension scalar quantization.
//!
//! Each dimension is quantized independently onto `2^bits` levels spanning the
//! per-dimension [min, max] observed at training time. Distances against the
//! decoded codes guide graph traversal; exact distances over raw vectors are
//! used for the final re-rank.

use parking_lot::RwLock;

use crate::error::{Error, Result};

use super::layout::{FORMAT_VERSION, SIDECAR_MAGIC};
use super::VectorId;

pub struct CompressedVectors {
    dim: usize,
    bits: u8,
    mins: Vec<f32>,
    steps: Vec<f32>, // quantization step per dimension; 0 for constant dims
    codes: RwLock<Vec<u8>>,
    capacity: usize,
}

impl CompressedVectors {
    /// Fit per-dimension ranges on `vectors` and encode them into the first
    /// slots. `capacity` reserves room for later inserts, which reuse the
    /// trained ranges (values outside are clamped).
    pub fn train(vectors: &[Vec<f32>], dim: usize, bits: u8, capacity: usize) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::InvalidConfig(format!(
                "bits per dimension must be in 1..=8, got {bits}"
            )));
        }
        if vectors.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let levels = (1u32 << bits) as f32;
        let mut mins = vec![f32::INFINITY; dim];
        let mut maxs = vec![f32::NEG_INFINITY; dim];
        for v in vectors {
            for d in 0..dim {
                mins[d] = mins[d].min(v[d]);
                maxs[d] = maxs[d].max(v[d]);
            }
        }
        let steps: Vec<f32> = (0..dim)
            .map(|d| {
                if maxs[d] > mins[d] {
                    (maxs[d] - mins[d]) / (levels - 1.0)
                } else {
                    0.0
                }
            })
            .collect();
        let cq = Self {
            dim,
            bits,
            mins,
            steps,
            codes: RwLock::new(vec![0u8; capacity * dim]),
            capacity,
        };
        for (i, v) in vectors.iter().enumerate() {
            cq.encode_into(VectorId(i as u32), v);
        }
        Ok(cq)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn encode_into(&self, id: VectorId, v: &[f32]) {
        debug_assert_eq!(v.len(), self.dim);
        debug_assert!((id.index() + 1) * self.dim <= self.capacity * self.dim);
        let mut codes = self.codes.write();
        let base = id.index() * self.dim;
        let max_code = ((1u32 << self.bits) - 1) as f32;
        for d in 0..self.dim {
            let code = if self.steps[d] > 0.0 {
                ((v[d] - self.mins[d]) / self.steps[d]).round().clamp(0.0, max_code)
            } else {
                0.0
            };
            codes[base + d] = code as u8;
        }
    }

    pub fn decode(&self, id: VectorId) -> Vec<f32> {
        let codes = self.codes.read();
        let base = id.index() * self.dim;
        (0..self.dim)
            .map(|d| self.mins[d] + codes[base + d] as f32 * self.steps[d])
            .collect()
    }

    /// L2 distance between a raw query and the decoded code of `id`.
    /// Deterministic: identical inputs give bit-identical results.
    pub fn approx_distance(&self, query: &[f32], id: VectorId) -> f32 {
        debug_assert_eq!(query.len(), self.dim);
        let codes = self.codes.read();
        let base = id.index() * self.dim;
        let mut acc = 0f64;
        for d in 0..self.dim {
            let decoded = self.mins[d] + codes[base + d] as f32 * self.steps[d];
            let diff = (query[d] - decoded) as f64;
            acc += diff * diff;
        }
        acc.sqrt() as f32
    }

    /// Worst-case L2 norm of the per-component decode error,
    /// `sqrt(sum_d (step_d / 2)^2)`.
    pub fn decode_error_bound(&self) -> f32 {
        let acc: f64 = self
            .steps
            .iter()
            .map(|&s| {
                let h = (s as f64) / 2.0;
                h * h
            })
            .sum();
        acc.sqrt() as f32
    }

    /// Sidecar serialization: magic, version, dim, bits, count, mins, steps,
    /// then `count * dim` code bytes.
    pub fn encode_sidecar(&self, count: usize) -> Vec<u8> {
        let codes = self.codes.read();
        let mut out = Vec::new();
        out.extend_from_slice(SIDECAR_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.bits as u32).to_le_bytes());
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for &m in &self.mins {
            out.extend_from_slice(&m.to_le_bytes());
        }
        for &s in &self.steps {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&codes[..count * self.dim]);
        out
    }

    pub fn decode_sidecar(bytes: &[u8], capacity: usize) -> Result<(Self, usize)> {
        let fail = |m: &str| Error::Format(format!("compressed-vector sidecar: {m}"));
        if bytes.len() < 8 + 4 + 4 + 4 + 8 {
            return Err(fail("truncated header"));
        }
        if &bytes[0..8] != SIDECAR_MAGIC {
            return Err(fail("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if u32_at(8) != FORMAT_VERSION {
            return Err(fail("unsupported version"));
        }
        let dim = u32_at(12) as usize;
        let bits = u32_at(16) as u8;
        let count = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
        let tables = 28 + dim * 8;
        if bytes.len() < tables + count * dim {
            return Err(fail("truncated payload"));
        }
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let mins: Vec<f32> = (0..dim).map(|d| f32_at(28 + d * 4)).collect();
        let steps: Vec<f32> = (0..dim).map(|d| f32_at(28 + dim * 4 + d * 4)).collect();
        let capacity = capacity.max(count);
        let mut codes = vec![0u8; capacity * dim];
        codes[..count * dim].copy_from_slice(&bytes[tables..tables + count * dim]);
        Ok((
            Self {
                dim,
                bits,
                mins,
                steps,
                codes: RwLock::new(codes),
                capacity,
            },
            count,
        ))
    }
}

/// Spearman rank correlation; test utility for quantizer fidelity checks.
pub fn spearman(xs: &[f32], ys: &[f32]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    let rank = |vals: &[f32]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap().then(a.cmp(&b)));
        let mut ranks = vec![0f64; n];
        for (r, &i) in idx.iter().enumerate() {
            ranks[i] = r as f64;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let mean = (n as f64 - 1.0) / 2.0;
    let mut num = 0f64;
    let mut dx = 0f64;
    let mut dy = 0f64;
    for i in 0..n {
        let a = rx[i] - mean;
        let b = ry[i] - mean;
        num += a * b;
        dx += a * a;
        dy += b * b;
    }
    num / (dx.sqrt() * dy.sqrt())
}
