//! The logical graph: fixed-size on-disk node records, in-memory compressed
//! vectors, tombstones, and incremental index construction.
//!
//! Records live in a memory store of padded fixed-size buffers, optionally
//! written through to a backing file. Devices in [`crate::io_layer`] serve
//! read payloads from this store; search traverses through the device to pay
//! (simulated or real) I/O latency, while update repair work reads the store
//! directly, as a user-space cache hit would.

mod layout;
mod quantizer;

pub use layout::{padded_record_size, raw_record_size, Header, FORMAT_VERSION, INDEX_MAGIC};
pub use quantizer::{spearman, CompressedVectors};

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU32, AtomicU64, AtomicU8, Ordering};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_layer::PayloadSource;
use crate::prune::{prune_monolithic, Candidate};
use crate::util::BitSet;

/// Identifier of a vector / graph node; dense in `[0, capacity)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VectorId(pub u32);

impl VectorId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for VectorId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One vector plus its out-neighbors; the fixed-size on-disk unit.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub vector: Vec<f32>,
    pub neighbors: Vec<VectorId>,
}

/// Distance metric. L2 is the only implemented metric; the enum exists so the
/// file format and config stay forward-compatible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    L2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexConfig {
    pub dim: usize,
    /// Maximum out-degree per node.
    pub r: usize,
    /// Build-time candidate pool size.
    pub l_build: usize,
    /// Pruning distance threshold (>= 1).
    pub alpha_prune: f32,
    /// Records pad to the next multiple of this; power of two, >= 64.
    pub record_align: usize,
    /// Search entry point; set to the dataset medoid by `build`.
    pub entry_point: VectorId,
    /// Record slots to allocate; 0 means "exactly the build size".
    /// Headroom beyond the build size allows later inserts.
    pub capacity: usize,
    /// Bits per dimension for the in-memory compressed vectors.
    pub quantizer_bits: u8,
    pub metric: Metric,
}

impl IndexConfig {
    pub fn new(dim: usize, r: usize, l_build: usize) -> Self {
        Self {
            dim,
            r,
            l_build,
            alpha_prune: 1.2,
            record_align: 4096,
            entry_point: VectorId(0),
            capacity: 0,
            quantizer_bits: 8,
            metric: Metric::L2,
        }
    }

    pub fn with_capacity(mut self, capacity: usize) -> Self {
        self.capacity = capacity;
        self
    }

    pub fn with_align(mut self, align: usize) -> Self {
        self.record_align = align;
        self
    }

    pub fn with_alpha(mut self, alpha: f32) -> Self {
        self.alpha_prune = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidConfig("dim must be >= 1".into()));
        }
        if self.r == 0 {
            return Err(Error::InvalidConfig("R must be >= 1".into()));
        }
        if self.l_build == 0 {
            return Err(Error::InvalidConfig("L_build must be >= 1".into()));
        }
        if !(self.alpha_prune >= 1.0) {
            return Err(Error::InvalidConfig("alpha_prune must be >= 1".into()));
        }
        if !self.record_align.is_power_of_two() || self.record_align < 64 {
            return Err(Error::InvalidConfig(
                "record_align must be a power of two >= 64".into(),
            ));
        }
        if !(1..=8).contains(&self.quantizer_bits) {
            return Err(Error::InvalidConfig("quantizer_bits must be in 1..=8".into()));
        }
        Ok(())
    }
}

/// Exact L2 distance; the metric `d` used by pruning and re-ranking.
pub fn exact_distance(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(l2_distance(a, b))
}

#[inline]
pub(crate) fn l2_distance(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0f64;
    for i in 0..a.len() {
        let d = (a[i] - b[i]) as f64;
        acc += d * d;
    }
    acc.sqrt() as f32
}

const ST_EMPTY: u8 = 0;
const ST_STAGED: u8 = 1; // vector stored, not yet linked into the graph
const ST_LIVE: u8 = 2;
const ST_TOMBSTONED: u8 = 3;

/// How a loaded index is backed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backing {
    /// Memory store only; `save` persists explicitly.
    Memory,
    /// Memory store with synchronous write-through to the index file.
    WriteThrough,
}

pub struct Index {
    cfg: IndexConfig,
    prs: usize,
    header_region: usize,
    records: Vec<RwLock<Box<[u8]>>>,
    versions: Vec<AtomicU64>,
    status: Vec<AtomicU8>,
    compressed: CompressedVectors,
    tombstones: RwLock<BTreeSet<u32>>,
    entry: AtomicU32,
    next_fresh: AtomicU32,
    free: Mutex<Vec<u32>>,
    file: Option<File>,
}

impl Index {
    fn empty(cfg: IndexConfig, compressed: CompressedVectors, capacity: usize) -> Self {
        let prs = padded_record_size(cfg.dim, cfg.r, cfg.record_align);
        let header_region = cfg.record_align;
        let records = (0..capacity)
            .map(|_| RwLock::new(vec![0u8; prs].into_boxed_slice()))
            .collect();
        let versions = (0..capacity).map(|_| AtomicU64::new(0)).collect();
        let status = (0..capacity).map(|_| AtomicU8::new(ST_EMPTY)).collect();
        Self {
            cfg,
            prs,
            header_region,
            records,
            versions,
            status,
            compressed,
            tombstones: RwLock::new(BTreeSet::new()),
            entry: AtomicU32::new(0),
            next_fresh: AtomicU32::new(0),
            free: Mutex::new(Vec::new()),
            file: None,
        }
    }

    /// Incremental insert-based construction: each vector is located with a
    /// graph search over the nodes inserted so far, pruned down to at most R
    /// diverse neighbors, and linked with reverse edges. The entry point is
    /// then set to the dataset medoid and reachability from it is verified
    /// (and repaired if needed).
    pub fn build(vectors: &[Vec<f32>], cfg: IndexConfig) -> Result<Self> {
        cfg.validate()?;
        if vectors.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for v in vectors {
            if v.len() != cfg.dim {
                return Err(Error::DimensionMismatch {
                    expected: cfg.dim,
                    got: v.len(),
                });
            }
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidRecord("non-finite vector component".into()));
            }
        }
        let capacity = if cfg.capacity == 0 {
            vectors.len()
        } else {
            cfg.capacity.max(vectors.len())
        };
        let compressed =
            CompressedVectors::train(vectors, cfg.dim, cfg.quantizer_bits, capacity)?;
        let mut cfg = cfg;
        cfg.capacity = capacity;
        let mut index = Self::empty(cfg, compressed, capacity);

        // First node: no edges, becomes the provisional entry point.
        index.put_record_raw(VectorId(0), &vectors[0], &[])?;
        index.status[0].store(ST_LIVE, Ordering::Release);
        index.next_fresh.store(1, Ordering::Release);
        index.entry.store(0, Ordering::Release);

        for (i, v) in vectors.iter().enumerate().skip(1) {
            let id = VectorId(i as u32);
            index.put_record_raw(id, v, &[])?;
            index.status[i].store(ST_STAGED, Ordering::Release);
            index.next_fresh.store(i as u32 + 1, Ordering::Release);
            index.link_for_build(id, v)?;
            index.status[i].store(ST_LIVE, Ordering::Release);
        }

        let medoid = medoid_of(vectors);
        index.entry.store(medoid as u32, Ordering::Release);
        index.cfg.entry_point = VectorId(medoid as u32);
        index.repair_reachability()?;
        Ok(index)
    }

    /// Search-then-prune linking used during construction.
    fn link_for_build(&self, id: VectorId, v: &[f32]) -> Result<()> {
        let expanded = crate::search::expand_candidates(self, v, self.cfg.l_build, 4)?;
        let pool: Vec<Candidate> = expanded
            .iter()
            .filter(|c| c.id != id)
            .map(|c| Candidate {
                id: c.id,
                dist_to_target: c.distance,
            })
            .collect();
        let cand_vectors: Vec<&[f32]> = expanded
            .iter()
            .filter(|c| c.id != id)
            .map(|c| c.vector.as_slice())
            .collect();
        let selected = prune_monolithic(v, &pool, &cand_vectors, self.cfg.alpha_prune, self.cfg.r);
        self.update_node(id, |rec| {
            rec.neighbors = selected.clone();
            true
        })?;
        for &nb in &selected {
            self.attach_backedge(nb, id)?;
        }
        Ok(())
    }

    /// Add an edge `from -> to`, pruning `from`'s list if it would overflow R.
    /// Appends are atomic under the record lock; the overflow path prunes over
    /// a snapshot of the current list plus the new id.
    pub(crate) fn attach_backedge(&self, from: VectorId, to: VectorId) -> Result<()> {
        let r = self.cfg.r;
        let appended = self.update_node(from, |rec| {
            if rec.neighbors.contains(&to) {
                return false;
            }
            if rec.neighbors.len() < r {
                rec.neighbors.push(to);
                return true;
            }
            false
        })?;
        if appended {
            return Ok(());
        }
        let snapshot = self.read_node(from)?;
        if snapshot.neighbors.contains(&to) {
            return Ok(());
        }
        let mut ids: Vec<VectorId> = snapshot.neighbors.clone();
        ids.push(to);
        let mut entries = Vec::with_capacity(ids.len());
        for nb in ids {
            let vec = self.vector(nb)?;
            entries.push((
                Candidate {
                    id: nb,
                    dist_to_target: l2_distance(&snapshot.vector, &vec),
                },
                vec,
            ));
        }
        entries.sort_by(|(a, _), (b, _)| {
            a.dist_to_target
                .partial_cmp(&b.dist_to_target)
                .unwrap()
                .then(a.id.cmp(&b.id))
        });
        let pool: Vec<Candidate> = entries.iter().map(|(c, _)| *c).collect();
        let refs: Vec<&[f32]> = entries.iter().map(|(_, v)| v.as_slice()).collect();
        let selected =
            prune_monolithic(&snapshot.vector, &pool, &refs, self.cfg.alpha_prune, r);
        self.update_node(from, |rec| {
            rec.neighbors = selected.clone();
            true
        })?;
        Ok(())
    }

    /// Breadth-first reachability from the entry point over addressable nodes.
    pub fn reachable_from_entry(&self) -> BitSet {
        let n = self.allocated() as usize;
        let mut seen = BitSet::new(n.max(1));
        if self.live_count() == 0 {
            return seen;
        }
        let entry = self.entry_point();
        let mut queue = std::collections::VecDeque::new();
        if entry.index() < n && self.is_addressable(entry) {
            seen.set(entry.index());
            queue.push_back(entry);
        }
        while let Some(id) = queue.pop_front() {
            if let Ok(nbrs) = self.neighbors(id) {
                for nb in nbrs {
                    if nb.index() < n && !seen.get(nb.index()) && self.is_addressable(nb) {
                        seen.set(nb.index());
                        queue.push_back(nb);
                    }
                }
            }
        }
        seen
    }

    /// Ensure every live node is BFS-reachable from the entry point. Each
    /// unreachable node gets an in-edge from its nearest reachable live node,
    /// evicting that node's farthest neighbor if its list is full.
    fn repair_reachability(&self) -> Result<()> {
        loop {
            let seen = self.reachable_from_entry();
            let unreachable: Vec<VectorId> = (0..self.allocated())
                .map(VectorId)
                .filter(|id| self.is_live(*id) && !seen.get(id.index()))
                .collect();
            let Some(&u) = unreachable.first() else {
                return Ok(());
            };
            let uvec = self.vector(u)?;
            let mut best: Option<(f32, VectorId)> = None;
            for id in (0..self.allocated()).map(VectorId) {
                if !seen.get(id.index()) || !self.is_live(id) {
                    continue;
                }
                let d = l2_distance(&uvec, &self.vector(id)?);
                if best.map_or(true, |(bd, bid)| (d, id) < (bd, bid)) {
                    best = Some((d, id));
                }
            }
            let Some((_, anchor)) = best else {
                return Err(Error::EmptyIndex);
            };
            let anchor_rec = self.read_node(anchor)?;
            let mut neighbors = anchor_rec.neighbors.clone();
            if neighbors.len() >= self.cfg.r {
                // Evict the farthest neighbor to make room.
                let mut victim = 0usize;
                let mut victim_key = (f32::NEG_INFINITY, VectorId(0));
                for (k, &nb) in neighbors.iter().enumerate() {
                    let d = l2_distance(&anchor_rec.vector, &self.vector(nb)?);
                    if (d, nb) > victim_key {
                        victim_key = (d, nb);
                        victim = k;
                    }
                }
                neighbors[victim] = u;
            } else {
                neighbors.push(u);
            }
            self.update_node(anchor, |rec| {
                rec.neighbors = neighbors.clone();
                true
            })?;
        }
    }

    // ----- accessors -----

    pub fn config(&self) -> &IndexConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn r(&self) -> usize {
        self.cfg.r
    }

    pub fn capacity(&self) -> usize {
        self.records.len()
    }

    pub fn padded_record_size(&self) -> usize {
        self.prs
    }

    pub fn header_region(&self) -> usize {
        self.header_region
    }

    /// Fixed byte offset of a record: `header_region + id * padded_record_size`.
    pub fn offset_of(&self, id: VectorId) -> u64 {
        (self.header_region + id.index() * self.prs) as u64
    }

    pub fn id_at_offset(&self, offset: u64) -> Option<VectorId> {
        let off = offset.checked_sub(self.header_region as u64)?;
        if off % self.prs as u64 != 0 {
            return None;
        }
        let idx = off / self.prs as u64;
        if (idx as usize) < self.capacity() {
            Some(VectorId(idx as u32))
        } else {
            None
        }
    }

    pub fn entry_point(&self) -> VectorId {
        VectorId(self.entry.load(Ordering::Acquire))
    }

    pub fn set_entry_point(&self, id: VectorId) {
        self.entry.store(id.0, Ordering::Release);
    }

    /// High-water mark of allocated record slots.
    pub fn allocated(&self) -> u32 {
        self.next_fresh.load(Ordering::Acquire)
    }

    pub fn compressed(&self) -> &CompressedVectors {
        &self.compressed
    }

    fn status_of(&self, id: VectorId) -> u8 {
        if id.index() >= self.capacity() {
            return ST_EMPTY;
        }
        self.status[id.index()].load(Ordering::Acquire)
    }

    pub fn is_live(&self, id: VectorId) -> bool {
        self.status_of(id) == ST_LIVE
    }

    pub fn is_tombstoned(&self, id: VectorId) -> bool {
        self.status_of(id) == ST_TOMBSTONED
    }

    /// Live or tombstoned: has a readable record and is navigable.
    pub fn is_addressable(&self, id: VectorId) -> bool {
        matches!(self.status_of(id), ST_LIVE | ST_TOMBSTONED)
    }

    pub fn live_count(&self) -> usize {
        (0..self.allocated())
            .filter(|&i| self.status[i as usize].load(Ordering::Acquire) == ST_LIVE)
            .count()
    }

    pub fn live_ids(&self) -> Vec<VectorId> {
        (0..self.allocated())
            .map(VectorId)
            .filter(|&id| self.is_live(id))
            .collect()
    }

    pub fn record_version(&self, id: VectorId) -> u64 {
        self.versions[id.index()].load(Ordering::Acquire)
    }

    // ----- record I/O -----

    pub fn read_node(&self, id: VectorId) -> Result<NodeRecord> {
        if id.index() >= self.capacity() || self.status_of(id) == ST_EMPTY {
            return Err(Error::UnknownId(id));
        }
        let guard = self.records[id.index()].read();
        layout::decode_record(&guard, self.cfg.dim, self.cfg.r, id)
    }

    /// Durable overwrite of a record at its fixed offset.
    pub fn write_node(&self, id: VectorId, rec: &NodeRecord) -> Result<()> {
        if id.index() >= self.capacity() || self.status_of(id) == ST_EMPTY {
            return Err(Error::UnknownId(id));
        }
        self.validate_record(id, rec)?;
        let bytes = layout::encode_record(rec, self.cfg.dim, self.cfg.r, self.prs);
        let mut guard = self.records[id.index()].write();
        guard.copy_from_slice(&bytes);
        self.versions[id.index()].fetch_add(1, Ordering::AcqRel);
        drop(guard);
        self.write_through(id, &bytes)
    }

    /// Atomic read-modify-write under the per-record lock. The closure returns
    /// whether the modified record should be written back. This is the
    /// serialization point for two writers of the same id.
    pub fn update_node<F>(&self, id: VectorId, f: F) -> Result<bool>
    where
        F: FnOnce(&mut NodeRecord) -> bool,
    {
        if id.index() >= self.capacity() || self.status_of(id) == ST_EMPTY {
            return Err(Error::UnknownId(id));
        }
        let mut guard = self.records[id.index()].write();
        let mut rec = layout::decode_record(&guard, self.cfg.dim, self.cfg.r, id)?;
        if !f(&mut rec) {
            return Ok(false);
        }
        self.validate_record(id, &rec)?;
        let bytes = layout::encode_record(&rec, self.cfg.dim, self.cfg.r, self.prs);
        guard.copy_from_slice(&bytes);
        self.versions[id.index()].fetch_add(1, Ordering::AcqRel);
        drop(guard);
        self.write_through(id, &bytes)?;
        Ok(true)
    }

    fn write_through(&self, id: VectorId, bytes: &[u8]) -> Result<()> {
        if let Some(file) = &self.file {
            use std::os::unix::fs::FileExt;
            file.write_at(bytes, self.offset_of(id))?;
        }
        Ok(())
    }

    fn validate_record(&self, id: VectorId, rec: &NodeRecord) -> Result<()> {
        if rec.vector.len() != self.cfg.dim {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.dim,
                got: rec.vector.len(),
            });
        }
        if rec.vector.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidRecord("non-finite vector component".into()));
        }
        if rec.neighbors.len() > self.cfg.r {
            return Err(Error::InvalidRecord(format!(
                "degree {} exceeds R={}",
                rec.neighbors.len(),
                self.cfg.r
            )));
        }
        let mut sorted = rec.neighbors.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidRecord("duplicate neighbor id".into()));
        }
        if rec.neighbors.contains(&id) {
            return Err(Error::InvalidRecord("self-loop".into()));
        }
        if let Some(&bad) = rec
            .neighbors
            .iter()
            .find(|n| n.index() >= self.capacity() || self.status_of(**n) == ST_EMPTY)
        {
            return Err(Error::InvalidRecord(format!(
                "neighbor {bad} is not an allocated id"
            )));
        }
        Ok(())
    }

    /// Raw write used during build/allocation, before the slot has a status.
    fn put_record_raw(&self, id: VectorId, vector: &[f32], neighbors: &[VectorId]) -> Result<()> {
        let rec = NodeRecord {
            vector: vector.to_vec(),
            neighbors: neighbors.to_vec(),
        };
        let bytes = layout::encode_record(&rec, self.cfg.dim, self.cfg.r, self.prs);
        let mut guard = self.records[id.index()].write();
        guard.copy_from_slice(&bytes);
        self.versions[id.index()].fetch_add(1, Ordering::AcqRel);
        drop(guard);
        self.write_through(id, &bytes)
    }

    /// Decode a device-read payload for `id` (checksum-verified).
    pub fn decode_payload(&self, id: VectorId, bytes: &[u8]) -> Result<NodeRecord> {
        layout::decode_record(bytes, self.cfg.dim, self.cfg.r, id)
    }

    /// Raw vector of `id`, decoded from its record.
    pub fn vector(&self, id: VectorId) -> Result<Vec<f32>> {
        Ok(self.read_node(id)?.vector)
    }

    pub fn neighbors(&self, id: VectorId) -> Result<Vec<VectorId>> {
        Ok(self.read_node(id)?.neighbors)
    }

    /// Approximate distance from a raw query to the compressed code of `id`.
    pub fn approx_distance(&self, query: &[f32], id: VectorId) -> Result<f32> {
        if query.len() != self.cfg.dim {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.dim,
                got: query.len(),
            });
        }
        if id.index() >= self.capacity() || self.status_of(id) == ST_EMPTY {
            return Err(Error::UnknownId(id));
        }
        Ok(self.compressed.approx_distance(query, id))
    }

    // ----- lifecycle -----

    /// Allocate a slot for a new vector: record and compressed code are
    /// written, but the node stays staged (excluded from results) until
    /// [`Self::mark_live`]. Reuses reclaimed slots before fresh ones.
    pub fn allocate_staged(&self, vector: &[f32]) -> Result<VectorId> {
        if vector.len() != self.cfg.dim {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.dim,
                got: vector.len(),
            });
        }
        if vector.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidRecord("non-finite vector component".into()));
        }
        let id = if let Some(reused) = self.free.lock().pop() {
            self.tombstones.write().remove(&reused);
            self.status[reused as usize].store(ST_STAGED, Ordering::Release);
            VectorId(reused)
        } else {
            loop {
                let cur = self.next_fresh.load(Ordering::Acquire);
                if cur as usize >= self.capacity() {
                    return Err(Error::CapacityExhausted);
                }
                if self
                    .next_fresh
                    .compare_exchange(cur, cur + 1, Ordering::AcqRel, Ordering::Acquire)
                    .is_ok()
                {
                    self.status[cur as usize].store(ST_STAGED, Ordering::Release);
                    break VectorId(cur);
                }
            }
        };
        self.compressed.encode_into(id, vector);
        self.put_record_raw(id, vector, &[])?;
        Ok(id)
    }

    pub fn mark_live(&self, id: VectorId) {
        self.status[id.index()].store(ST_LIVE, Ordering::Release);
    }

    /// Tombstone live ids; they disappear from results immediately but stay
    /// navigable until repair tasks drain.
    pub fn tombstone(&self, ids: &[VectorId]) -> Result<()> {
        for &id in ids {
            if !self.is_live(id) {
                return Err(if id.index() >= self.capacity() || self.status_of(id) == ST_EMPTY {
                    Error::UnknownId(id)
                } else {
                    Error::NotLive(id)
                });
            }
        }
        let mut set = self.tombstones.write();
        for &id in ids {
            self.status[id.index()].store(ST_TOMBSTONED, Ordering::Release);
            set.insert(id.0);
        }
        Ok(())
    }

    /// Return tombstoned slots to the free list once no repair task references
    /// them; ids stay tombstoned until actually reused.
    pub fn reclaim(&self, ids: &[VectorId]) {
        let mut free = self.free.lock();
        for &id in ids {
            debug_assert!(self.is_tombstoned(id));
            free.push(id.0);
        }
    }

    pub fn tombstone_count(&self) -> usize {
        self.tombstones.read().len()
    }

    // ----- persistence -----

    /// Write the index file (header, fixed-offset records, tombstone region)
    /// and the compressed-vector sidecar. Call with update work drained.
    pub fn save(&self, index_path: &Path, sidecar_path: &Path) -> Result<()> {
        let count = self.allocated() as usize;
        let tombs: Vec<u32> = self.tombstones.read().iter().copied().collect();
        let tombstone_offset = (self.header_region + count * self.prs) as u64;
        let header = Header {
            dim: self.cfg.dim as u32,
            r: self.cfg.r as u32,
            padded_record_size: self.prs as u32,
            count: count as u64,
            entry_point: self.entry_point().0 as u64,
            tombstone_offset,
            tombstone_len: (tombs.len() * 8) as u64,
        };
        let mut file = File::create(index_path)?;
        let mut head = header.encode();
        head.resize(self.header_region, 0);
        file.write_all(&head)?;
        for i in 0..count {
            let guard = self.records[i].read();
            file.write_all(&guard)?;
        }
        for t in tombs {
            file.write_all(&(t as u64).to_le_bytes())?;
        }
        file.sync_all()?;
        std::fs::write(sidecar_path, self.compressed.encode_sidecar(count))?;
        Ok(())
    }

    /// Load an index and its sidecar. `l_build` and `alpha_prune` are not part
    /// of the file format and come from the options.
    pub fn load(
        index_path: &Path,
        sidecar_path: &Path,
        opts: LoadOptions,
    ) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(index_path)?.read_to_end(&mut bytes)?;
        let header = Header::decode(&bytes)?;
        let count = header.count as usize;
        let prs = header.padded_record_size as usize;
        let header_region = header.tombstone_offset as usize - count * prs;
        if !header_region.is_power_of_two() || header_region < layout::HEADER_BYTES {
            return Err(Error::Format("inconsistent header region".into()));
        }
        if bytes.len() < header.tombstone_offset as usize + header.tombstone_len as usize {
            return Err(Error::Format("index file truncated".into()));
        }
        let capacity = count + opts.capacity_headroom;
        let sidecar = std::fs::read(sidecar_path)?;
        let (compressed, side_count) = CompressedVectors::decode_sidecar(&sidecar, capacity)?;
        if side_count != count || compressed.dim() != header.dim as usize {
            return Err(Error::Format(
                "sidecar does not match index header".into(),
            ));
        }
        let cfg = IndexConfig {
            dim: header.dim as usize,
            r: header.r as usize,
            l_build: opts.l_build,
            alpha_prune: opts.alpha_prune,
            record_align: header_region,
            entry_point: VectorId(header.entry_point as u32),
            capacity,
            quantizer_bits: compressed.bits(),
            metric: Metric::L2,
        };
        cfg.validate()?;
        if padded_record_size(cfg.dim, cfg.r, cfg.record_align) != prs {
            return Err(Error::Format("record size mismatch".into()));
        }
        let mut index = Self::empty(cfg, compressed, capacity);
        for i in 0..count {
            let off = header_region + i * prs;
            index.records[i].get_mut().copy_from_slice(&bytes[off..off + prs]);
            index.status[i] = AtomicU8::new(ST_LIVE);
        }
        index.next_fresh = AtomicU32::new(count as u32);
        index.entry = AtomicU32::new(header.entry_point as u32);
        let tomb_off = header.tombstone_offset as usize;
        let mut tombs = BTreeSet::new();
        for k in 0..(header.tombstone_len as usize / 8) {
            let id = u64::from_le_bytes(
                bytes[tomb_off + k * 8..tomb_off + k * 8 + 8].try_into().unwrap(),
            ) as u32;
            if (id as usize) < count {
                index.status[id as usize] = AtomicU8::new(ST_TOMBSTONED);
                tombs.insert(id);
            }
        }
        // Loaded tombstones have no pending repair tasks, so they are
        // immediately reclaimable.
        index.free = Mutex::new(tombs.iter().rev().copied().collect());
        index.tombstones = RwLock::new(tombs);
        if opts.backing == Backing::WriteThrough {
            index.file = Some(OpenOptions::new().read(true).write(true).open(index_path)?);
        }
        Ok(index)
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub backing: Backing,
    pub capacity_headroom: usize,
    pub l_build: usize,
    pub alpha_prune: f32,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            backing: Backing::Memory,
            capacity_headroom: 0,
            l_build: 32,
            alpha_prune: 1.2,
        }
    }
}

impl PayloadSource for Index {
    fn read(&self, offset: u64, len: usize) -> Result<Vec<u8>> {
        let id = self
            .id_at_offset(offset)
            .ok_or_else(|| Error::Device(format!("unaligned read at offset {offset}")))?;
        if len != self.prs {
            return Err(Error::Device(format!(
                "read length {len} != padded record size {}",
                self.prs
            )));
        }
        if self.status_of(id) == ST_EMPTY {
            return Err(Error::UnknownId(id));
        }
        Ok(self.records[id.index()].read().to_vec())
    }

    fn version(&self, offset: u64) -> u64 {
        match self.id_at_offset(offset) {
            Some(id) => self.record_version(id),
            None => 0,
        }
    }
}

/// Medoid: dataset element minimizing total distance to the others. Exact for
/// n <= 1000; above that both candidates and the reference set are a
/// deterministic stride sample of 1000 points. Ties break to the lower index.
pub(crate) fn medoid_of(vectors: &[Vec<f32>]) -> usize {
    let n = vectors.len();
    if n == 1 {
        return 0;
    }
    let sample: Vec<usize> = if n <= 1000 {
        (0..n).collect()
    } else {
        (0..1000).map(|i| i * n / 1000).collect()
    };
    let mut best = (f64::INFINITY, usize::MAX);
    for &c in &sample {
        let mut total = 0f64;
        for &x in &sample {
            if x != c {
                total += l2_distance(&vectors[c], &vectors[x]) as f64;
            }
        }
        if (total, c) < best {
            best = (total, c);
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(dim: usize, r: usize) -> IndexConfig {
        IndexConfig::new(dim, r, 16).with_align(64)
    }

    pub(crate) fn random_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect()
    }

    #[test]
    fn build_single_vector() {
        let idx = Index::build(&[vec![1.0, 2.0]], small_cfg(2, 4)).unwrap();
        assert_eq!(idx.live_count(), 1);
        assert_eq!(idx.entry_point(), VectorId(0));
        assert!(idx.neighbors(VectorId(0)).unwrap().is_empty());
    }

    #[test]
    fn build_rejects_bad_input() {
        assert!(matches!(
            Index::build(&[], small_cfg(2, 4)),
            Err(Error::EmptyDataset)
        ));
        assert!(matches!(
            Index::build(&[vec![1.0, 2.0], vec![1.0]], small_cfg(2, 4)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn build_three_identical_vectors() {
        let v = vec![0.5f32, -0.5];
        let idx = Index::build(&[v.clone(), v.clone(), v.clone()], small_cfg(2, 2)).unwrap();
        for i in 0..3u32 {
            let nbrs = idx.neighbors(VectorId(i)).unwrap();
            assert!(nbrs.len() <= 2);
            assert!(nbrs.iter().all(|n| n.0 < 3 && *n != VectorId(i)));
        }
        // Ties broken by lower id: medoid of identical points is node 0.
        assert_eq!(idx.entry_point(), VectorId(0));
        let seen = idx.reachable_from_entry();
        assert_eq!(seen.count_ones(), 3);
    }

    #[test]
    fn build_reaches_all_nodes() {
        let vectors = random_vectors(300, 8, 42);
        let cfg = IndexConfig::new(8, 8, 24).with_align(64);
        let idx = Index::build(&vectors, cfg).unwrap();
        let seen = idx.reachable_from_entry();
        assert_eq!(seen.count_ones(), 300);
        for i in 0..300u32 {
            assert!(idx.neighbors(VectorId(i)).unwrap().len() <= 8);
        }
        assert_eq!(idx.entry_point().index(), medoid_of(&vectors));
    }

    #[test]
    fn read_write_roundtrip() {
        let vectors = random_vectors(10, 4, 1);
        let idx = Index::build(&vectors, small_cfg(4, 4)).unwrap();
        let rec = NodeRecord {
            vector: vec![9.0, 8.0, 7.0, 6.0],
            neighbors: vec![VectorId(1), VectorId(2)],
        };
        idx.write_node(VectorId(7), &rec).unwrap();
        assert_eq!(idx.read_node(VectorId(7)).unwrap(), rec);
        // Overwrite changes only that record.
        let before3 = idx.read_node(VectorId(3)).unwrap();
        idx.write_node(
            VectorId(7),
            &NodeRecord {
                vector: vec![0.0; 4],
                neighbors: vec![],
            },
        )
        .unwrap();
        assert_eq!(idx.read_node(VectorId(3)).unwrap(), before3);
    }

    #[test]
    fn read_out_of_bounds_is_unknown_id() {
        let idx = Index::build(&[vec![0.0, 0.0]], small_cfg(2, 4)).unwrap();
        assert!(matches!(
            idx.read_node(VectorId(99)),
            Err(Error::UnknownId(VectorId(99)))
        ));
    }

    #[test]
    fn write_node_rejects_invariant_violations() {
        let vectors = random_vectors(6, 2, 3);
        let idx = Index::build(&vectors, small_cfg(2, 2)).unwrap();
        let bad_degree = NodeRecord {
            vector: vec![0.0, 0.0],
            neighbors: vec![VectorId(1), VectorId(2), VectorId(3)],
        };
        assert!(idx.write_node(VectorId(0), &bad_degree).is_err());
        let self_loop = NodeRecord {
            vector: vec![0.0, 0.0],
            neighbors: vec![VectorId(0)],
        };
        assert!(idx.write_node(VectorId(0), &self_loop).is_err());
        let dup = NodeRecord {
            vector: vec![0.0, 0.0],
            neighbors: vec![VectorId(1), VectorId(1)],
        };
        assert!(idx.write_node(VectorId(0), &dup).is_err());
    }

    #[test]
    fn concurrent_writes_to_distinct_ids() {
        let vectors = random_vectors(64, 4, 9);
        let idx = std::sync::Arc::new(Index::build(&vectors, small_cfg(4, 4)).unwrap());
        std::thread::scope(|s| {
            for t in 0..4 {
                let idx = std::sync::Arc::clone(&idx);
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
                    for round in 0..200 {
                        let id = VectorId(t * 16 + rng.gen_range(0..16));
                        let rec = NodeRecord {
                            vector: vec![t as f32, round as f32, 0.0, 0.0],
                            neighbors: vec![VectorId((id.0 + 1) % 64)],
                        };
                        idx.write_node(id, &rec).unwrap();
                        assert_eq!(idx.read_node(id).unwrap(), rec);
                    }
                });
            }
        });
        for i in 0..64u32 {
            idx.read_node(VectorId(i)).unwrap();
        }
    }

    #[test]
    fn exact_distance_basics() {
        assert_eq!(exact_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(exact_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(exact_distance(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn metric_axioms_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let dim = rng.gen_range(1..8);
            let v = |rng: &mut ChaCha8Rng| -> Vec<f32> {
                (0..dim).map(|_| rng.gen_range(-10.0f32..10.0)).collect()
            };
            let (a, b, c) = (v(&mut rng), v(&mut rng), v(&mut rng));
            let dab = exact_distance(&a, &b).unwrap();
            let dba = exact_distance(&b, &a).unwrap();
            let dac = exact_distance(&a, &c).unwrap();
            let dbc = exact_distance(&b, &c).unwrap();
            assert_eq!(dab, dba);
            assert!(dab >= 0.0);
            // f32 rounding slack on the triangle inequality.
            assert!(dac <= dab + dbc + 1e-4 * (1.0 + dac.abs()));
        }
    }

    #[test]
    fn tombstone_and_reuse_cycle() {
        let vectors = random_vectors(8, 2, 5);
        let cfg = small_cfg(2, 4).with_capacity(8);
        let idx = Index::build(&vectors, cfg).unwrap();
        idx.tombstone(&[VectorId(3)]).unwrap();
        assert!(idx.is_tombstoned(VectorId(3)));
        assert!(!idx.is_live(VectorId(3)));
        assert!(matches!(
            idx.tombstone(&[VectorId(3)]),
            Err(Error::NotLive(_))
        ));
        idx.reclaim(&[VectorId(3)]);
        // Full capacity: the next allocation must reuse slot 3.
        let id = idx.allocate_staged(&[5.0, 5.0]).unwrap();
        assert_eq!(id, VectorId(3));
        assert!(!idx.is_tombstoned(id));
        idx.mark_live(id);
        assert_eq!(idx.vector(id).unwrap(), vec![5.0, 5.0]);
        // Capacity exhausted afterwards.
        assert!(matches!(
            idx.allocate_staged(&[0.0, 0.0]),
            Err(Error::CapacityExhausted)
        ));
    }

    #[test]
    fn save_load_roundtrip_with_tombstones() {
        let dir = tempfile::tempdir().unwrap();
        let vectors = random_vectors(50, 4, 13);
        let idx = Index::build(&vectors, small_cfg(4, 6)).unwrap();
        idx.tombstone(&[VectorId(5), VectorId(17)]).unwrap();
        let ipath = dir.path().join("idx.lios");
        let spath = dir.path().join("idx.cvq");
        idx.save(&ipath, &spath).unwrap();

        let loaded = Index::load(&ipath, &spath, LoadOptions::default()).unwrap();
        assert_eq!(loaded.allocated(), 50);
        assert_eq!(loaded.entry_point(), idx.entry_point());
        assert_eq!(loaded.live_count(), 48);
        assert!(loaded.is_tombstoned(VectorId(5)));
        for i in 0..50u32 {
            assert_eq!(
                loaded.read_node(VectorId(i)).unwrap(),
                idx.read_node(VectorId(i)).unwrap()
            );
        }
    }

    #[test]
    fn payload_source_matches_records() {
        let vectors = random_vectors(5, 2, 21);
        let idx = Index::build(&vectors, small_cfg(2, 2)).unwrap();
        let off = idx.offset_of(VectorId(2));
        let payload = PayloadSource::read(&idx, off, idx.padded_record_size()).unwrap();
        let direct = idx.records[2].read().to_vec();
        assert_eq!(payload, direct);
        assert!(PayloadSource::read(&idx, off + 1, idx.padded_record_size()).is_err());
    }

    #[test]
    fn medoid_prefers_center() {
        let vectors = vec![
            vec![0.0, 0.0],
            vec![10.0, 0.0],
            vec![5.0, 0.1], // central point
            vec![0.0, 10.0],
        ];
        assert_eq!(medoid_of(&vectors), 2);
    }
}
