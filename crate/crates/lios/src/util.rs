//! Small shared utilities: a flat bitset and the record checksum.

/// Flat bitset over a fixed capacity. Used for visited/seen sets during
/// search and for the `done` flags of resumable pruning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitSet {
    words: Vec<u64>,
    len: usize,
}

impl BitSet {
    pub fn new(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, idx: usize) -> bool {
        debug_assert!(idx < self.len);
        self.words[idx / 64] & (1u64 << (idx % 64)) != 0
    }

    #[inline]
    pub fn set(&mut self, idx: usize) {
        debug_assert!(idx < self.len);
        self.words[idx / 64] |= 1u64 << (idx % 64);
    }

    pub fn clear(&mut self) {
        self.words.fill(0);
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Packed little-endian bytes, `ceil(len/8)` of them.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len.div_ceil(8);
        let mut out = vec![0u8; n];
        for (i, b) in out.iter_mut().enumerate() {
            let word = self.words[i / 8];
            *b = (word >> ((i % 8) * 8)) as u8;
        }
        out
    }

    /// Rebuild from packed bytes; `bytes` must hold exactly `ceil(len/8)` bytes
    /// and padding bits past `len` must be zero.
    pub fn from_bytes(bytes: &[u8], len: usize) -> Option<Self> {
        if bytes.len() != len.div_ceil(8) {
            return None;
        }
        let mut set = Self::new(len);
        for (i, &b) in bytes.iter().enumerate() {
            set.words[i / 8] |= (b as u64) << ((i % 8) * 8);
        }
        // Reject set bits beyond the logical length.
        for idx in len..set.words.len() * 64 {
            if set.words[idx / 64] & (1u64 << (idx % 64)) != 0 {
                return None;
            }
        }
        Some(set)
    }
}

/// FNV-1a over a byte slice; the per-record checksum of the index file format.
#[inline]
pub fn fnv1a(bytes: &[u8]) -> u32 {
    let mut hash: u32 = 0x811c_9dc5;
    for &b in bytes {
        hash ^= b as u32;
        hash = hash.wrapping_mul(0x0100_0193);
    }
    hash
}
