//! Shadow state: the taint pool, bit-array taint sets, the per-register taint
//! file and the set-associative FIFO cache holding memory taint sets.
//!
//! Every taint carries a reference count equal to the number of sets
//! (register slots plus valid cache ways) that contain it. A taint whose
//! count drops to zero is returned to the pool immediately.

use crate::isa::{MemAddr, RegisterId, NUM_REGISTERS};
use smallvec::SmallVec;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaintId(pub u32);

impl TaintId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TaintId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

const WORD_BITS: usize = 64;

fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

/// A fixed-width bit array with one bit per taint.
///
/// All sets of one session share the same width. Two words are stored
/// inline, which covers the default budget of 128 taints without touching
/// the heap.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct TaintSet {
    words: SmallVec<[u64; 2]>,
}

impl TaintSet {
    pub fn empty(width: usize) -> Self {
        Self {
            words: smallvec::smallvec![0; words_for(width)],
        }
    }

    pub fn singleton(width: usize, id: TaintId) -> Self {
        let mut s = Self::empty(width);
        s.insert(id);
        s
    }

    pub fn from_ids(width: usize, ids: impl IntoIterator<Item = TaintId>) -> Self {
        let mut s = Self::empty(width);
        for id in ids {
            s.insert(id);
        }
        s
    }

    /// Number of taint slots this set can represent (rounded up to whole words).
    pub fn capacity(&self) -> usize {
        self.words.len() * WORD_BITS
    }

    #[inline]
    pub fn insert(&mut self, id: TaintId) {
        self.words[id.index() / WORD_BITS] |= 1 << (id.index() % WORD_BITS);
    }

    #[inline]
    pub fn remove(&mut self, id: TaintId) {
        self.words[id.index() / WORD_BITS] &= !(1 << (id.index() % WORD_BITS));
    }

    #[inline]
    pub fn contains(&self, id: TaintId) -> bool {
        self.words
            .get(id.index() / WORD_BITS)
            .is_some_and(|w| w & (1 << (id.index() % WORD_BITS)) != 0)
    }

    /// In-place union (bitwise or).
    #[inline]
    pub fn union_with(&mut self, other: &TaintSet) {
        debug_assert_eq!(self.words.len(), other.words.len());
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= *b;
        }
    }

    #[inline]
    pub fn difference_with(&mut self, other: &TaintSet) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= !*b;
        }
    }

    #[inline]
    pub fn clear(&mut self) {
        self.words.iter_mut().for_each(|w| *w = 0);
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_subset(&self, other: &TaintSet) -> bool {
        self.words
            .iter()
            .zip(&other.words)
            .all(|(a, b)| a & !b == 0)
    }

    pub fn first(&self) -> Option<TaintId> {
        self.iter().next()
    }

    /// Members in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = TaintId> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut rest = w;
            std::iter::from_fn(move || {
                if rest == 0 {
                    return None;
                }
                let bit = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                Some(TaintId((wi * WORD_BITS + bit) as u32))
            })
        })
    }
}

impl fmt::Debug for TaintSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter().map(|t| t.0)).finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaintEntry {
    pub origin: MemAddr,
    pub seq: u64,
    pub refcount: u32,
}

/// Per-taint bookkeeping: origin address, allocation order and reference count.
#[derive(Debug, Clone)]
pub struct TaintTable {
    entries: Vec<Option<TaintEntry>>,
    free: TaintSet,
    next_seq: u64,
}

impl TaintTable {
    pub fn new(budget: usize) -> Self {
        assert!(budget > 0, "taint budget must be positive");
        let free = TaintSet::from_ids(budget, (0..budget as u32).map(TaintId));
        Self {
            entries: vec![None; budget],
            free,
            next_seq: 0,
        }
    }

    pub fn budget(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, id: TaintId) -> Option<&TaintEntry> {
        self.entries.get(id.index())?.as_ref()
    }

    pub fn is_live(&self, id: TaintId) -> bool {
        self.get(id).is_some()
    }

    pub fn origin(&self, id: TaintId) -> Option<MemAddr> {
        self.get(id).map(|e| e.origin)
    }

    pub fn live_count(&self) -> usize {
        self.budget() - self.free.len()
    }

    pub fn live(&self) -> impl Iterator<Item = (TaintId, &TaintEntry)> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.as_ref().map(|e| (TaintId(i as u32), e)))
    }

    /// Takes the lowest free id, or `None` when every taint is live.
    pub fn try_alloc(&mut self, origin: MemAddr) -> Option<TaintId> {
        let id = self.free.first()?;
        self.free.remove(id);
        self.entries[id.index()] = Some(TaintEntry {
            origin,
            seq: self.next_seq,
            refcount: 0,
        });
        self.next_seq += 1;
        Some(id)
    }

    /// The live taint with the smallest allocation sequence number.
    pub fn earliest(&self) -> Option<TaintId> {
        self.live().min_by_key(|(_, e)| e.seq).map(|(id, _)| id)
    }

    fn release(&mut self, id: TaintId) {
        self.entries[id.index()] = None;
        self.free.insert(id);
    }

    fn retain(&mut self, id: TaintId) {
        let e = self.entries[id.index()]
            .as_mut()
            .expect("retained taint must be live");
        e.refcount += 1;
    }

    /// Returns true if the taint was freed.
    fn unretain(&mut self, id: TaintId) -> bool {
        let e = self.entries[id.index()]
            .as_mut()
            .expect("released taint must be live");
        e.refcount -= 1;
        if e.refcount == 0 {
            self.release(id);
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegisterTaintFile {
    sets: Vec<TaintSet>,
}

impl RegisterTaintFile {
    pub fn new(width: usize) -> Self {
        Self {
            sets: vec![TaintSet::empty(width); NUM_REGISTERS],
        }
    }

    #[inline]
    pub fn get(&self, reg: RegisterId) -> &TaintSet {
        &self.sets[reg.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (RegisterId, &TaintSet)> {
        RegisterId::all().zip(&self.sets)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheGeometry {
    pub sets: usize,
    pub ways: usize,
}

impl Default for CacheGeometry {
    fn default() -> Self {
        Self { sets: 256, ways: 8 }
    }
}

#[derive(Debug, Clone)]
struct Way {
    valid: bool,
    tag: MemAddr,
    taints: TaintSet,
    inserted: u64,
}

/// Set-associative cache of memory taint sets with first-in-first-out
/// replacement. Lookups never touch the replacement order.
#[derive(Debug, Clone)]
pub struct MemoryTaintCache {
    geometry: CacheGeometry,
    shift: u32,
    ways: Vec<Way>,
    clock: u64,
}

impl MemoryTaintCache {
    /// `granularity` is the tracking granularity in bytes; tags are expected
    /// to be aligned to it and the set index is taken above those bits.
    pub fn new(geometry: CacheGeometry, width: usize, granularity: u64) -> Self {
        assert!(
            geometry.sets > 0 && geometry.ways > 0,
            "empty cache geometry"
        );
        assert!(
            granularity.is_power_of_two(),
            "granularity must be a power of two"
        );
        let way = Way {
            valid: false,
            tag: MemAddr(0),
            taints: TaintSet::empty(width),
            inserted: 0,
        };
        Self {
            geometry,
            shift: granularity.trailing_zeros(),
            ways: vec![way; geometry.sets * geometry.ways],
            clock: 0,
        }
    }

    pub fn geometry(&self) -> CacheGeometry {
        self.geometry
    }

    fn set_range(&self, tag: MemAddr) -> std::ops::Range<usize> {
        let set = ((tag.0 >> self.shift) % self.geometry.sets as u64) as usize;
        let start = set * self.geometry.ways;
        start..start + self.geometry.ways
    }

    fn find(&self, tag: MemAddr) -> Option<usize> {
        self.set_range(tag)
            .find(|&i| self.ways[i].valid && self.ways[i].tag == tag)
    }

    /// The cached set for `tag`, or `None` on a miss.
    pub fn lookup(&self, tag: MemAddr) -> Option<&TaintSet> {
        self.find(tag).map(|i| &self.ways[i].taints)
    }

    /// Stores `taints` for `tag`, replacing any existing entry in place.
    /// An empty set invalidates the entry. When the set is full the way
    /// inserted first is dropped and its taints are returned.
    pub fn store(&mut self, tag: MemAddr, taints: TaintSet) -> Option<TaintSet> {
        if let Some(i) = self.find(tag) {
            if taints.is_empty() {
                self.ways[i].valid = false;
                self.ways[i].taints.clear();
            } else {
                self.ways[i].taints = taints;
            }
            return None;
        }
        if taints.is_empty() {
            return None;
        }
        let range = self.set_range(tag);
        let slot = range.clone().find(|&i| !self.ways[i].valid);
        let (slot, evicted) = match slot {
            Some(i) => (i, None),
            None => {
                let oldest = range
                    .min_by_key(|&i| self.ways[i].inserted)
                    .expect("non-empty set");
                let old = std::mem::replace(&mut self.ways[oldest].taints, TaintSet::empty(0));
                (oldest, Some(old))
            }
        };
        self.clock += 1;
        self.ways[slot] = Way {
            valid: true,
            tag,
            taints,
            inserted: self.clock,
        };
        evicted
    }

    /// Valid entries as `(tag, set)` pairs, in storage order.
    pub fn entries(&self) -> impl Iterator<Item = (MemAddr, &TaintSet)> {
        self.ways
            .iter()
            .filter(|w| w.valid)
            .map(|w| (w.tag, &w.taints))
    }

    /// Tags of one cache set ordered from first-in to last-in.
    pub fn fifo_order(&self, tag: MemAddr) -> Vec<MemAddr> {
        let mut ways: Vec<&Way> = self
            .set_range(tag)
            .map(|i| &self.ways[i])
            .filter(|w| w.valid)
            .collect();
        ways.sort_by_key(|w| w.inserted);
        ways.into_iter().map(|w| w.tag).collect()
    }

    /// Removes `id` from every cached set, visiting at most `limit` sets
    /// that contain it. Returns how many sets were changed.
    fn purge(&mut self, id: TaintId, limit: u32) -> u32 {
        let mut hits = 0;
        for w in self.ways.iter_mut().filter(|w| w.valid) {
            if hits == limit {
                break;
            }
            if w.taints.contains(id) {
                w.taints.remove(id);
                if w.taints.is_empty() {
                    w.valid = false;
                }
                hits += 1;
            }
        }
        hits
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct ShadowStats {
    /// Taints reclaimed because the pool was exhausted.
    pub taint_evictions: u64,
    /// Cache ways dropped by FIFO replacement.
    pub cache_evictions: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaintError {
    #[error("no live taints to evict")]
    NoLiveTaints,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InvariantViolation {
    #[error("taint {id}: stored refcount {stored}, scan found {actual}")]
    RefcountMismatch {
        id: TaintId,
        stored: u32,
        actual: u32,
    },
    #[error("free taint {id} still present in {location}")]
    FreeTaintPresent { id: TaintId, location: String },
    #[error("live taint {id} has refcount 0")]
    LiveUnreferenced { id: TaintId },
    #[error("cache set holds {count} valid ways, more than {ways}")]
    CacheOverfull { count: usize, ways: usize },
    #[error("cache holds duplicate tag {tag}")]
    DuplicateTag { tag: MemAddr },
    #[error("cache holds an empty set for {tag}")]
    EmptyEntry { tag: MemAddr },
    #[error("leak point {addr} is not an accessed address")]
    LeakPointNotAccessed { addr: MemAddr },
    #[error("addressing register {reg} still tainted after a memory access")]
    AddressingRegisterTainted { reg: RegisterId },
}

/// The full shadow state owned by one analysis session.
#[derive(Debug, Clone)]
pub struct ShadowState {
    table: TaintTable,
    regs: RegisterTaintFile,
    cache: MemoryTaintCache,
    stats: ShadowStats,
}

impl ShadowState {
    pub fn new(budget: usize, geometry: CacheGeometry, granularity: u64) -> Self {
        Self {
            table: TaintTable::new(budget),
            regs: RegisterTaintFile::new(budget),
            cache: MemoryTaintCache::new(geometry, budget, granularity),
            stats: ShadowStats::default(),
        }
    }

    pub fn table(&self) -> &TaintTable {
        &self.table
    }

    pub fn registers(&self) -> &RegisterTaintFile {
        &self.regs
    }

    pub fn cache(&self) -> &MemoryTaintCache {
        &self.cache
    }

    pub fn stats(&self) -> ShadowStats {
        self.stats
    }

    pub fn empty_set(&self) -> TaintSet {
        TaintSet::empty(self.table.budget())
    }

    #[inline]
    pub fn register(&self, reg: RegisterId) -> &TaintSet {
        self.regs.get(reg)
    }

    /// Allocates a fresh taint for `origin`, evicting the earliest live
    /// taint first when the pool is exhausted. The new taint is live with a
    /// reference count of zero until it is placed in a set.
    pub fn alloc(&mut self, origin: MemAddr) -> TaintId {
        if let Some(id) = self.table.try_alloc(origin) {
            return id;
        }
        self.evict_earliest()
            .expect("exhausted pool has live taints");
        self.table
            .try_alloc(origin)
            .expect("eviction frees a taint")
    }

    /// Frees the live taint with the smallest sequence number by removing it
    /// from every set. Its origin is not treated as a leak point.
    pub fn evict_earliest(&mut self) -> Result<TaintId, TaintError> {
        let id = self.table.earliest().ok_or(TaintError::NoLiveTaints)?;
        self.purge(id);
        self.stats.taint_evictions += 1;
        Ok(id)
    }

    /// Removes every taint in `taints` from all sets and frees them,
    /// returning their origins in ascending taint order.
    pub fn retire_leaked(&mut self, taints: &TaintSet) -> Vec<MemAddr> {
        let mut origins = Vec::with_capacity(taints.len());
        for id in taints.iter() {
            let origin = self.table.origin(id).expect("retired taints must be live");
            origins.push(origin);
            self.purge(id);
        }
        origins
    }

    fn purge(&mut self, id: TaintId) {
        let mut remaining = self.table.get(id).map_or(0, |e| e.refcount);
        for set in self.regs.sets.iter_mut() {
            if remaining == 0 {
                break;
            }
            if set.contains(id) {
                set.remove(id);
                remaining -= 1;
            }
        }
        if remaining > 0 {
            remaining -= self.cache.purge(id, remaining);
        }
        debug_assert_eq!(remaining, 0, "refcount of taint {id} overstated");
        if self.table.is_live(id) {
            self.table.release(id);
        }
    }

    fn retain_all(&mut self, set: &TaintSet) {
        for id in set.iter() {
            self.table.retain(id);
        }
    }

    fn unretain_all(&mut self, set: &TaintSet) {
        for id in set.iter() {
            self.table.unretain(id);
        }
    }

    /// Replaces a register's taint set, adjusting reference counts. Taints
    /// left with no containing set become free.
    pub fn set_register(&mut self, reg: RegisterId, taints: TaintSet) {
        // retain first so taints shared by the old and new set survive
        self.retain_all(&taints);
        let old = std::mem::replace(&mut self.regs.sets[reg.index()], taints);
        self.unretain_all(&old);
    }

    /// The memory taint set for `tag`; empty on a miss.
    pub fn cache_lookup(&self, tag: MemAddr) -> TaintSet {
        self.cache
            .lookup(tag)
            .cloned()
            .unwrap_or_else(|| self.empty_set())
    }

    /// Stores a memory taint set with reference counting. Returns the set
    /// dropped by FIFO replacement, if any.
    pub fn cache_store(&mut self, tag: MemAddr, taints: TaintSet) -> Option<TaintSet> {
        self.retain_all(&taints);
        let replaced = self.cache.lookup(tag).cloned();
        let evicted = self.cache.store(tag, taints);
        if let Some(old) = replaced {
            self.unretain_all(&old);
        }
        if let Some(dropped) = &evicted {
            self.stats.cache_evictions += 1;
            self.unretain_all(dropped);
        }
        evicted
    }

    /// Recomputes every reference count by a full scan and checks the
    /// structural invariants of the table and the cache.
    pub fn audit(&self) -> Result<(), InvariantViolation> {
        let budget = self.table.budget();
        let mut counts = vec![0u32; budget];
        let mut locations: Vec<Option<String>> = vec![None; budget];
        for (reg, set) in self.regs.iter() {
            for id in set.iter() {
                counts[id.index()] += 1;
                locations[id.index()].get_or_insert_with(|| reg.to_string());
            }
        }
        for (tag, set) in self.cache.entries() {
            if set.is_empty() {
                return Err(InvariantViolation::EmptyEntry { tag });
            }
            for id in set.iter() {
                counts[id.index()] += 1;
                locations[id.index()].get_or_insert_with(|| format!("cache entry {tag}"));
            }
        }
        for (i, &actual) in counts.iter().enumerate() {
            let id = TaintId(i as u32);
            match self.table.get(id) {
                None if actual > 0 => {
                    return Err(InvariantViolation::FreeTaintPresent {
                        id,
                        location: locations[i].take().unwrap_or_default(),
                    })
                }
                None => {}
                Some(e) if e.refcount != actual => {
                    return Err(InvariantViolation::RefcountMismatch {
                        id,
                        stored: e.refcount,
                        actual,
                    })
                }
                Some(e) if e.refcount == 0 => {
                    return Err(InvariantViolation::LiveUnreferenced { id })
                }
                Some(_) => {}
            }
        }
        let ways = self.cache.geometry.ways;
        for chunk in self.cache.ways.chunks(ways) {
            let valid: Vec<&Way> = chunk.iter().filter(|w| w.valid).collect();
            if valid.len() > ways {
                return Err(InvariantViolation::CacheOverfull {
                    count: valid.len(),
                    ways,
                });
            }
            for (k, w) in valid.iter().enumerate() {
                if valid[..k].iter().any(|o| o.tag == w.tag) {
                    return Err(InvariantViolation::DuplicateTag { tag: w.tag });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reg(i: usize) -> RegisterId {
        RegisterId::new(i).unwrap()
    }

    fn set(width: usize, ids: &[u32]) -> TaintSet {
        TaintSet::from_ids(width, ids.iter().map(|&i| TaintId(i)))
    }

    #[test]
    fn first_allocation_is_id_zero() {
        let mut t = TaintTable::new(128);
        let id = t.try_alloc(MemAddr(0x7fff41801683)).unwrap();
        assert_eq!(id, TaintId(0));
        let e = t.get(id).unwrap();
        assert_eq!((e.seq, e.refcount), (0, 0));
        assert_eq!(e.origin, MemAddr(0x7fff41801683));
    }

    #[test]
    fn allocations_are_distinct_and_ordered() {
        let mut t = TaintTable::new(8);
        let a = t.try_alloc(MemAddr(1)).unwrap();
        let b = t.try_alloc(MemAddr(2)).unwrap();
        assert_ne!(a, b);
        assert!(t.get(b).unwrap().seq > t.get(a).unwrap().seq);
    }

    #[test]
    fn exhausted_pool_evicts_the_earliest() {
        // T=2: t0 (seq 0) and t1 (seq 1) are live, so the third allocation
        // has to reclaim t0 and hands the same id back.
        let mut s = ShadowState::new(2, CacheGeometry::default(), 1);
        let t0 = s.alloc(MemAddr(0x10));
        s.set_register(reg(1), TaintSet::singleton(2, t0));
        let t1 = s.alloc(MemAddr(0x20));
        s.set_register(reg(2), TaintSet::singleton(2, t1));
        let t2 = s.alloc(MemAddr(0x30));
        assert_eq!(t2, t0);
        assert_eq!(s.stats().taint_evictions, 1);
        assert!(s.register(reg(1)).is_empty());
        assert_eq!(s.table().origin(t2), Some(MemAddr(0x30)));
        assert_eq!(s.table().get(t2).unwrap().seq, 2);
    }

    #[test]
    fn evict_picks_minimal_seq() {
        let mut s = ShadowState::new(16, CacheGeometry::default(), 1);
        let mut ids = Vec::new();
        for k in 0..10 {
            let id = s.alloc(MemAddr(k));
            s.set_register(reg(k as usize), TaintSet::singleton(16, id));
            ids.push(id);
        }
        // free seq 0..5 so the minimum live seq is 5
        for k in 0..5 {
            s.set_register(reg(k), TaintSet::empty(16));
        }
        assert_eq!(s.table().get(ids[5]).unwrap().seq, 5);
        assert_eq!(s.evict_earliest().unwrap(), ids[5]);
        assert_eq!(s.evict_earliest().unwrap(), ids[6]);
    }

    #[test]
    fn evict_on_empty_table_errors() {
        let mut s = ShadowState::new(4, CacheGeometry::default(), 1);
        assert_eq!(s.evict_earliest(), Err(TaintError::NoLiveTaints));
    }

    #[test]
    fn eviction_clears_every_copy() {
        let mut s = ShadowState::new(8, CacheGeometry::default(), 1);
        let t = s.alloc(MemAddr(0x40));
        let other = s.alloc(MemAddr(0x48));
        for r in [3, 4, 5] {
            s.set_register(reg(r), TaintSet::singleton(8, t));
        }
        s.set_register(reg(6), set(8, &[other.0]));
        s.cache_store(MemAddr(0x100), set(8, &[t.0, other.0]));
        assert_eq!(s.table().get(t).unwrap().refcount, 4);
        s.audit().unwrap();

        assert_eq!(s.evict_earliest().unwrap(), t);
        for r in [3, 4, 5] {
            assert!(s.register(reg(r)).is_empty());
        }
        assert_eq!(s.cache_lookup(MemAddr(0x100)), set(8, &[other.0]));
        assert!(!s.table().is_live(t));
        s.audit().unwrap();
    }

    #[test]
    fn retire_returns_origins_and_frees() {
        let mut s = ShadowState::new(8, CacheGeometry::default(), 1);
        let tx = s.alloc(MemAddr(0xa000));
        s.set_register(reg(10), TaintSet::singleton(8, tx));
        let ty = s.alloc(MemAddr(0xb000));
        s.set_register(reg(11), TaintSet::singleton(8, ty));
        s.set_register(reg(4), set(8, &[tx.0, ty.0]));
        // unrelated register holding tx too
        s.set_register(reg(20), TaintSet::singleton(8, tx));

        let origins = s.retire_leaked(&s.register(reg(4)).clone());
        assert_eq!(origins, vec![MemAddr(0xa000), MemAddr(0xb000)]);
        for r in [4, 10, 11, 20] {
            assert!(s.register(reg(r)).is_empty());
        }
        assert_eq!(s.table().live_count(), 0);
        s.audit().unwrap();
    }

    #[test]
    fn retire_of_empty_set_is_a_no_op() {
        let mut s = ShadowState::new(8, CacheGeometry::default(), 1);
        let t = s.alloc(MemAddr(1));
        s.set_register(reg(1), TaintSet::singleton(8, t));
        assert!(s.retire_leaked(&TaintSet::empty(8)).is_empty());
        assert_eq!(s.table().live_count(), 1);
    }

    #[test]
    fn overwriting_last_reference_frees_the_taint() {
        let mut s = ShadowState::new(4, CacheGeometry::default(), 1);
        let t = s.alloc(MemAddr(1));
        s.set_register(reg(1), TaintSet::singleton(4, t));
        // r1 = r1 op r1 keeps it alive
        let same = s.register(reg(1)).clone();
        s.set_register(reg(1), same);
        assert!(s.table().is_live(t));
        s.set_register(reg(1), TaintSet::empty(4));
        assert!(!s.table().is_live(t));
        s.audit().unwrap();
    }

    #[test]
    fn cache_write_then_read() {
        let mut s = ShadowState::new(8, CacheGeometry::default(), 1);
        let t = s.alloc(MemAddr(1));
        s.cache_store(MemAddr(0x100), TaintSet::singleton(8, t));
        assert_eq!(s.cache_lookup(MemAddr(0x100)), TaintSet::singleton(8, t));
        assert!(s.cache_lookup(MemAddr(0x101)).is_empty());
    }

    #[test]
    fn storing_empty_set_invalidates() {
        let mut s = ShadowState::new(8, CacheGeometry::default(), 1);
        let t = s.alloc(MemAddr(1));
        s.cache_store(MemAddr(0x100), TaintSet::singleton(8, t));
        s.cache_store(MemAddr(0x100), TaintSet::empty(8));
        assert!(s.cache_lookup(MemAddr(0x100)).is_empty());
        assert_eq!(s.cache().entries().count(), 0);
        assert!(!s.table().is_live(t));
    }

    #[test]
    fn fifo_evicts_first_inserted_tag() {
        // one set, two ways: tags 0x10, 0x20, 0x30 all collide
        let geometry = CacheGeometry { sets: 1, ways: 2 };
        let mut c = MemoryTaintCache::new(geometry, 8, 1);
        assert!(c.store(MemAddr(0x10), set(8, &[0])).is_none());
        assert!(c.store(MemAddr(0x20), set(8, &[1])).is_none());
        // a lookup must not refresh 0x10
        assert!(c.lookup(MemAddr(0x10)).is_some());
        let evicted = c.store(MemAddr(0x30), set(8, &[2]));
        assert_eq!(evicted, Some(set(8, &[0])));
        assert!(c.lookup(MemAddr(0x10)).is_none());
        assert_eq!(
            c.fifo_order(MemAddr(0x30)),
            vec![MemAddr(0x20), MemAddr(0x30)]
        );
    }

    #[test]
    fn replacing_an_entry_keeps_its_fifo_slot() {
        let geometry = CacheGeometry { sets: 1, ways: 2 };
        let mut c = MemoryTaintCache::new(geometry, 8, 1);
        c.store(MemAddr(0x10), set(8, &[0]));
        c.store(MemAddr(0x20), set(8, &[1]));
        c.store(MemAddr(0x10), set(8, &[3]));
        let evicted = c.store(MemAddr(0x30), set(8, &[2]));
        assert_eq!(evicted, Some(set(8, &[3])));
    }

    #[test]
    fn eviction_loses_information() {
        let geometry = CacheGeometry { sets: 1, ways: 1 };
        let mut s = ShadowState::new(8, geometry, 1);
        let t0 = s.alloc(MemAddr(1));
        s.cache_store(MemAddr(0x100), TaintSet::singleton(8, t0));
        let t1 = s.alloc(MemAddr(2));
        let dropped = s.cache_store(MemAddr(0x200), TaintSet::singleton(8, t1));
        assert_eq!(dropped, Some(TaintSet::singleton(8, t0)));
        assert!(s.cache_lookup(MemAddr(0x100)).is_empty());
        assert_eq!(s.stats().cache_evictions, 1);
        assert!(!s.table().is_live(t0));
        s.audit().unwrap();
    }

    #[test]
    fn capacity_w_plus_one() {
        for ways in 1..6 {
            let geometry = CacheGeometry { sets: 4, ways };
            let mut c = MemoryTaintCache::new(geometry, 8, 1);
            // same set index: stride of `sets`
            let tags: Vec<MemAddr> = (0..=ways as u64).map(|k| MemAddr(k * 4)).collect();
            for (k, &t) in tags.iter().enumerate() {
                let ev = c.store(t, set(8, &[k as u32 % 8]));
                assert_eq!(ev.is_some(), k == ways);
            }
            assert!(c.lookup(tags[0]).is_none());
            assert_eq!(c.fifo_order(tags[0]).len(), ways);
        }
    }

    #[test]
    fn granularity_groups_set_index() {
        let geometry = CacheGeometry { sets: 2, ways: 1 };
        let mut c = MemoryTaintCache::new(geometry, 8, 64);
        c.store(MemAddr(0), set(8, &[0]));
        // 64 maps to the other set, so nothing is evicted
        assert!(c.store(MemAddr(64), set(8, &[1])).is_none());
        assert!(c.store(MemAddr(128), set(8, &[2])).is_some());
    }

    #[test]
    fn set_basics() {
        let tx = set(128, &[0]);
        let ty = set(128, &[1]);
        let mut u = tx.clone();
        u.union_with(&ty);
        assert_eq!(u, set(128, &[0, 1]));
        let mut a = u.clone();
        a.union_with(&u);
        assert_eq!(a, u);
        a.union_with(&TaintSet::empty(128));
        assert_eq!(a, u);
        assert_eq!(a.iter().collect::<Vec<_>>(), vec![TaintId(0), TaintId(1)]);
        a.clear();
        assert!(a.is_empty());
        assert_eq!(format!("{:?}", set(200, &[3, 130])), "{3, 130}");
    }

    fn taint_set(width: usize) -> impl Strategy<Value = TaintSet> {
        prop::collection::vec(0..width as u32, 0..12)
            .prop_map(move |ids| TaintSet::from_ids(width, ids.into_iter().map(TaintId)))
    }

    proptest! {
        #[test]
        fn union_is_bitwise_or(a in taint_set(200), b in taint_set(200)) {
            let mut u = a.clone();
            u.union_with(&b);
            for i in 0..200 {
                let id = TaintId(i);
                prop_assert_eq!(u.contains(id), a.contains(id) || b.contains(id));
            }
            prop_assert!(a.is_subset(&u) && b.is_subset(&u));
        }
    }
}
