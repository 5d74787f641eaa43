//! On-disk layout: fixed-size node records and the index file header.
//!
//! Every record serializes to the same padded size so that
//! `offset(id) = header_region + id * padded_record_size` and each record is
//! one aligned device read. Layout, little-endian:
//!
//! ```text
//! header:  magic "LIOSIDX1" | version u32 | dim u32 | R u32
//!          | padded_record_size u32 | count u64 | entry_point u64
//!          | tombstone_offset u64 | tombstone_len u64
//! record:  vector f32*dim | neighbor_count u32 | neighbors u32*R | checksum u32
//!          | zero padding to padded_record_size
//! ```
//!
//! The header region is padded to one `record_align` unit so records start
//! aligned. Tombstones are stored after the records as sorted u64 ids.

use crate::error::{Error, Result};
use crate::util::fnv1a;

use super::{NodeRecord, VectorId};

pub const INDEX_MAGIC: &[u8; 8] = b"LIOSIDX1";
pub const SIDECAR_MAGIC: &[u8; 8] = b"LIOSCVQ1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 8 + 4 + 4 + 4 + 4 + 8 + 8 + 8 + 8;

/// Unpadded record payload size.
pub fn raw_record_size(dim: usize, r: usize) -> usize {
    dim * 4 + 4 + r * 4 + 4
}

/// Record size padded up to the next multiple of `align`.
pub fn padded_record_size(dim: usize, r: usize, align: usize) -> usize {
    raw_record_size(dim, r).div_ceil(align) * align
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub dim: u32,
    pub r: u32,
    pub padded_record_size: u32,
    pub count: u64,
    pub entry_point: u64,
    pub tombstone_offset: u64,
    pub tombstone_len: u64,
}

impl Header {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&self.r.to_le_bytes());
        out.extend_from_slice(&self.padded_record_size.to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
        out.extend_from_slice(&self.entry_point.to_le_bytes());
        out.extend_from_slice(&self.tombstone_offset.to_le_bytes());
        out.extend_from_slice(&self.tombstone_len.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Format("index header truncated".into()));
        }
        if &bytes[0..8] != INDEX_MAGIC {
            return Err(Error::Format("bad index magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        Ok(Self {
            dim: u32_at(12),
            r: u32_at(16),
            padded_record_size: u32_at(20),
            count: u64_at(24),
            entry_point: u64_at(32),
            tombstone_offset: u64_at(40),
            tombstone_len: u64_at(48),
        })
    }
}

/// Serialize a record into a fixed `padded` buffer. The caller has already
/// validated the record against the index invariants.
pub fn encode_record(rec: &NodeRecord, dim: usize, r: usize, padded: usize) -> Vec<u8> {
    debug_assert_eq!(rec.vector.len(), dim);
    debug_assert!(rec.neighbors.len() <= r);
    let raw = raw_record_size(dim, r);
    let mut buf = vec![0u8; padded];
    let mut off = 0;
    for &c in &rec.vector {
        buf[off..off + 4].copy_from_slice(&c.to_le_bytes());
        off += 4;
    }
    buf[off..off + 4].copy_from_slice(&(rec.neighbors.len() as u32).to_le_bytes());
    off += 4;
    for &n in &rec.neighbors {
        buf[off..off + 4].copy_from_slice(&n.0.to_le_bytes());
        off += 4;
    }
    off = raw - 4; // unused neighbor slots stay zero
    let sum = fnv1a(&buf[..off]);
    buf[off..off + 4].copy_from_slice(&sum.to_le_bytes());
    buf
}

/// Decode and verify a record read for `id`.
pub fn decode_record(bytes: &[u8], dim: usize, r: usize, id: VectorId) -> Result<NodeRecord> {
    let raw = raw_record_size(dim, r);
    if bytes.len() < raw {
        return Err(Error::CorruptRecord {
            id: id.0,
            reason: "short read".into(),
        });
    }
    let stored = u32::from_le_bytes(bytes[raw - 4..raw].try_into().unwrap());
    let computed = fnv1a(&bytes[..raw - 4]);
    if stored != computed {
        return Err(Error::CorruptRecord {
            id: id.0,
            reason: format!("checksum mismatch: stored {stored:#x}, computed {computed:#x}"),
        });
    }
    let mut vector = Vec::with_capacity(dim);
    let mut off = 0;
    for _ in 0..dim {
        vector.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
        off += 4;
    }
    let count = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    off += 4;
    if count > r {
        return Err(Error::CorruptRecord {
            id: id.0,
            reason: format!("neighbor count {count} exceeds R={r}"),
        });
    }
    let mut neighbors = Vec::with_capacity(count);
    for k in 0..count {
        let n = u32::from_le_bytes(bytes[off + k * 4..off + k * 4 + 4].try_into().unwrap());
        neighbors.push(VectorId(n));
    }
    Ok(NodeRecord { vector, neighbors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_roundtrip() {
        let h = Header {
            dim: 16,
            r: 32,
            padded_record_size: 4096,
            count: 1000,
            entry_point: 17,
            tombstone_offset: 4096 + 1000 * 4096,
            tombstone_len: 24,
        };
        let bytes = h.encode();
        assert_eq!(bytes.len(), HEADER_BYTES);
        assert_eq!(Header::decode(&bytes).unwrap(), h);
    }

    #[test]
    fn header_rejects_bad_magic() {
        let mut bytes = Header {
            dim: 2,
            r: 2,
            padded_record_size: 64,
            count: 0,
            entry_point: 0,
            tombstone_offset: 0,
            tombstone_len: 0,
        }
        .encode();
        bytes[0] = b'X';
        assert!(Header::decode(&bytes).is_err());
    }

    #[test]
    fn record_roundtrip_and_uniform_size() {
        let rec = NodeRecord {
            vector: vec![1.0, -2.5, 3.25],
            neighbors: vec![VectorId(4), VectorId(9)],
        };
        let full = NodeRecord {
            vector: vec![0.0, 0.0, 0.0],
            neighbors: (0..8).map(VectorId).collect(),
        };
        let a = encode_record(&rec, 3, 8, 64);
        let b = encode_record(&full, 3, 8, 64);
        assert_eq!(a.len(), 64);
        assert_eq!(a.len(), b.len());
        assert_eq!(decode_record(&a, 3, 8, VectorId(1)).unwrap(), rec);
        assert_eq!(decode_record(&b, 3, 8, VectorId(2)).unwrap(), full);
    }

    #[test]
    fn record_checksum_detects_corruption() {
        let rec = NodeRecord {
            vector: vec![1.0, 2.0],
            neighbors: vec![VectorId(3)],
        };
        let mut bytes = encode_record(&rec, 2, 4, 64);
        bytes[0] ^= 0x40;
        let err = decode_record(&bytes, 2, 4, VectorId(7)).unwrap_err();
        assert!(matches!(err, Error::CorruptRecord { id: 7, .. }));
    }
}
