//! Per-instruction taint propagation, watch regions and leak-point tagging.
//!
//! Each memory access first snapshots the taint sets of every register it
//! reads. Taints reaching an addressing register are leaks: their origins
//! become leak points and the taints are retired from all shadow state.
//! Stores through untainted addressing registers untag the stored-to bytes,
//! and the stored data's taints go to the memory taint cache. Loads assign
//! a fresh taint when the address is watched and inherit whatever the cache
//! holds for it. ALU results take the union of their sources' taints;
//! constants are untainted.

use crate::isa::{InstructionRecord, MemAddr, Operation, RegisterId, WatchDirective};
use crate::taint::{
    CacheGeometry, InvariantViolation, ShadowState, ShadowStats, TaintId, TaintSet,
};
use crate::tracer::{Flow, PropagationEvent};
use smallvec::SmallVec;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Every load is treated as loading a value.
    Aggregating,
    /// Only loads from registered watch regions are.
    #[default]
    Tracking,
}

/// What an access contributes to the accessed-address set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessCounting {
    /// Every byte of `[ea, ea + size)`.
    #[default]
    Bytes,
    /// Only the starting address.
    Starts,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct EngineConfig {
    pub mode: Mode,
    pub taints: usize,
    pub cache_sets: usize,
    pub cache_ways: usize,
    pub granularity: u64,
    pub access_counting: AccessCounting,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let geometry = CacheGeometry::default();
        Self {
            mode: Mode::Tracking,
            taints: 128,
            cache_sets: geometry.sets,
            cache_ways: geometry.ways,
            granularity: 1,
            access_counting: AccessCounting::Bytes,
        }
    }
}

impl EngineConfig {
    pub fn aggregating() -> Self {
        Self {
            mode: Mode::Aggregating,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.taints == 0 {
            return Err(EngineError::InvalidConfig(
                "taint budget must be at least 1".into(),
            ));
        }
        if self.cache_sets == 0 || self.cache_ways == 0 {
            return Err(EngineError::InvalidConfig(
                "cache needs at least one set and one way".into(),
            ));
        }
        if !self.granularity.is_power_of_two() {
            return Err(EngineError::InvalidConfig(format!(
                "granularity {} is not a power of two",
                self.granularity
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("no watch region registered at {0}")]
    UnwatchUnknownRegion(MemAddr),
    #[error("watch region at {0} has zero length")]
    EmptyWatchRegion(MemAddr),
    #[error("invalid engine configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Invariant(#[from] InvariantViolation),
}

/// Registered watch regions plus their normalized union.
#[derive(Debug, Clone, Default)]
pub struct WatchRegions {
    registered: BTreeMap<u64, u64>,
    // start -> inclusive end, non-overlapping and non-adjacent
    merged: BTreeMap<u64, u64>,
    universal: bool,
}

impl WatchRegions {
    pub fn universal() -> Self {
        Self {
            universal: true,
            ..Self::default()
        }
    }

    pub fn is_universal(&self) -> bool {
        self.universal
    }

    /// Registers `[base, base + len)`. Re-registering a base replaces its length.
    pub fn register(&mut self, base: MemAddr, len: u64) -> Result<(), EngineError> {
        if len == 0 {
            return Err(EngineError::EmptyWatchRegion(base));
        }
        self.registered.insert(base.0, len);
        self.rebuild();
        Ok(())
    }

    pub fn unregister(&mut self, base: MemAddr) -> Result<(), EngineError> {
        self.registered
            .remove(&base.0)
            .ok_or(EngineError::UnwatchUnknownRegion(base))?;
        self.rebuild();
        Ok(())
    }

    fn rebuild(&mut self) {
        self.merged.clear();
        let mut current: Option<(u64, u64)> = None;
        for (&base, &len) in &self.registered {
            let end = base.saturating_add(len - 1);
            current = match current {
                Some((s, e)) if base <= e.saturating_add(1) => Some((s, e.max(end))),
                Some((s, e)) => {
                    self.merged.insert(s, e);
                    Some((base, end))
                }
                None => Some((base, end)),
            };
        }
        if let Some((s, e)) = current {
            self.merged.insert(s, e);
        }
    }

    pub fn contains(&self, addr: MemAddr) -> bool {
        self.universal
            || self
                .merged
                .range(..=addr.0)
                .next_back()
                .is_some_and(|(_, &end)| addr.0 <= end)
    }

    /// Normalized intervals as `(start, inclusive end)`.
    pub fn intervals(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.merged.iter().map(|(&s, &e)| (s, e))
    }

    pub fn is_empty(&self) -> bool {
        !self.universal && self.registered.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct LeakEvent {
    /// Origin of the leaked taint.
    pub leak_point: MemAddr,
    /// The effective address the value was turned into.
    pub transformed_into: MemAddr,
    #[serde(serialize_with = "ser_taint")]
    pub taint: TaintId,
    /// One-based index of the instruction.
    pub instr_index: u64,
    pub pc: Option<MemAddr>,
    pub sym: Option<String>,
}

fn ser_taint<S: serde::Serializer>(t: &TaintId, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_u32(t.0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Leak(LeakEvent),
    /// A leak point overwritten by a store through untainted addressing registers.
    Untag {
        addr: MemAddr,
        instr_index: u64,
    },
    Propagation(PropagationEvent),
}

#[derive(Debug)]
pub struct Engine {
    config: EngineConfig,
    shadow: ShadowState,
    watches: WatchRegions,
    accessed: HashSet<u64>,
    leak_points: BTreeSet<u64>,
    instr_count: u64,
    mask: u64,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let geometry = CacheGeometry {
            sets: config.cache_sets,
            ways: config.cache_ways,
        };
        let watches = match config.mode {
            Mode::Aggregating => WatchRegions::universal(),
            Mode::Tracking => WatchRegions::default(),
        };
        Ok(Self {
            shadow: ShadowState::new(config.taints, geometry, config.granularity),
            watches,
            accessed: HashSet::new(),
            leak_points: BTreeSet::new(),
            instr_count: 0,
            mask: !(config.granularity - 1),
            config,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn shadow(&self) -> &ShadowState {
        &self.shadow
    }

    pub fn stats(&self) -> ShadowStats {
        self.shadow.stats()
    }

    pub fn watches(&self) -> &WatchRegions {
        &self.watches
    }

    pub fn instructions(&self) -> u64 {
        self.instr_count
    }

    pub fn leak_points(&self) -> impl Iterator<Item = MemAddr> + '_ {
        self.leak_points.iter().map(|&a| MemAddr(a))
    }

    pub fn is_accessed(&self, addr: MemAddr) -> bool {
        self.accessed.contains(&addr.0)
    }

    /// `(|A|, |L|)` at the current instruction boundary.
    pub fn snapshot_counts(&self) -> (u64, u64) {
        (self.accessed.len() as u64, self.leak_points.len() as u64)
    }

    /// Registers a watch region. Ignored in aggregating mode, where
    /// everything is already watched.
    pub fn register_watch(&mut self, base: MemAddr, len: u64) -> Result<(), EngineError> {
        if self.watches.is_universal() {
            return Ok(());
        }
        self.watches.register(base, len)
    }

    pub fn unregister_watch(&mut self, base: MemAddr) -> Result<(), EngineError> {
        if self.watches.is_universal() {
            return Ok(());
        }
        self.watches.unregister(base)
    }

    pub fn apply_directive(&mut self, d: &WatchDirective) -> Result<(), EngineError> {
        match *d {
            WatchDirective::Watch { base, len } => self.register_watch(base, len),
            WatchDirective::Unwatch { base } => self.unregister_watch(base),
        }
    }

    #[inline]
    fn key(&self, addr: MemAddr) -> MemAddr {
        MemAddr(addr.0 & self.mask)
    }

    fn record_access(&mut self, ea: MemAddr, size: u8) {
        match self.config.access_counting {
            AccessCounting::Starts => {
                self.accessed.insert(ea.0 & self.mask);
            }
            AccessCounting::Bytes => {
                for off in 0..size as u64 {
                    self.accessed.insert(ea.0.wrapping_add(off) & self.mask);
                }
            }
        }
    }

    /// Applies one instruction and returns the events it produced, in order.
    pub fn step(&mut self, record: &InstructionRecord) -> Vec<Event> {
        let mut events = Vec::new();
        self.step_into(record, &mut events);
        events
    }

    pub fn step_into(&mut self, record: &InstructionRecord, events: &mut Vec<Event>) {
        self.instr_count += 1;
        let i = self.instr_count;
        let prop = |flow: Flow, taints: TaintSet| {
            Event::Propagation(PropagationEvent {
                flow,
                taints,
                instr_index: i,
                pc: record.pc,
                sym: record.sym.clone(),
            })
        };

        match &record.op {
            Operation::Load {
                addr_regs,
                ea,
                size,
                ..
            }
            | Operation::Store {
                addr_regs,
                ea,
                size,
                ..
            } => {
                let ea = *ea;
                let addr_snaps: SmallVec<[(RegisterId, TaintSet); 2]> = addr_regs
                    .iter()
                    .map(|&r| (r, self.shadow.register(r).clone()))
                    .collect();
                let data_snap = match record.op {
                    Operation::Store { src, .. } => Some((src, self.shadow.register(src).clone())),
                    _ => None,
                };

                self.record_access(ea, *size);

                let mut leaked = self.shadow.empty_set();
                for (reg, snap) in &addr_snaps {
                    if !snap.is_empty() {
                        events.push(prop(Flow::AddressUse { reg: *reg, ea }, snap.clone()));
                        leaked.union_with(snap);
                    }
                }
                if !leaked.is_empty() {
                    for taint in leaked.iter() {
                        let origin = self
                            .shadow
                            .table()
                            .origin(taint)
                            .expect("taints in registers are live");
                        self.leak_points.insert(origin.0);
                        events.push(Event::Leak(LeakEvent {
                            leak_point: origin,
                            transformed_into: ea,
                            taint,
                            instr_index: i,
                            pc: record.pc,
                            sym: record.sym.clone(),
                        }));
                    }
                    self.shadow.retire_leaked(&leaked);
                }

                let tag = self.key(ea);
                match record.op {
                    Operation::Store { .. } => {
                        let (src, mut data) = data_snap.expect("store has a data source");
                        if leaked.is_empty() {
                            self.untag_footprint(ea, *size, i, events);
                        }
                        data.difference_with(&leaked);
                        if !data.is_empty() {
                            events.push(prop(Flow::RegToMem { src, addr: ea }, data.clone()));
                        }
                        self.shadow.cache_store(tag, data);
                    }
                    Operation::Load { dst, .. } => {
                        let mut result = self.shadow.empty_set();
                        if self.watches.contains(ea) {
                            let fresh = self.shadow.alloc(tag);
                            result.insert(fresh);
                            events.push(prop(Flow::LoadAssign { addr: ea, dst }, result.clone()));
                        }
                        let inherited = self.shadow.cache_lookup(tag);
                        if !inherited.is_empty() {
                            events.push(prop(Flow::MemToReg { addr: ea, dst }, inherited.clone()));
                            result.union_with(&inherited);
                        }
                        self.shadow.set_register(dst, result);
                    }
                    _ => unreachable!(),
                }
            }
            Operation::Alu { dst, srcs } => {
                let mut result = self.shadow.empty_set();
                for (k, &src) in srcs.iter().enumerate() {
                    if srcs[..k].contains(&src) {
                        continue;
                    }
                    let snap = self.shadow.register(src);
                    if !snap.is_empty() {
                        result.union_with(snap);
                        events.push(prop(Flow::RegToReg { src, dst: *dst }, snap.clone()));
                    }
                }
                self.shadow.set_register(*dst, result);
            }
            Operation::Const { dst } => {
                let empty = self.shadow.empty_set();
                self.shadow.set_register(*dst, empty);
            }
            Operation::Nop => {}
        }
    }

    fn untag_footprint(&mut self, ea: MemAddr, size: u8, i: u64, events: &mut Vec<Event>) {
        let first = ea.0 & self.mask;
        let last = ea.0.saturating_add(size as u64 - 1) & self.mask;
        let hit: SmallVec<[u64; 8]> = self.leak_points.range(first..=last).copied().collect();
        for addr in hit {
            self.leak_points.remove(&addr);
            events.push(Event::Untag {
                addr: MemAddr(addr),
                instr_index: i,
            });
        }
    }

    /// Full consistency check: shadow-state refcounts and structure, plus
    /// every leak point being an accessed address.
    pub fn audit(&self) -> Result<(), InvariantViolation> {
        self.shadow.audit()?;
        if let Some(&addr) = self.leak_points.iter().find(|a| !self.accessed.contains(a)) {
            return Err(InvariantViolation::LeakPointNotAccessed {
                addr: MemAddr(addr),
            });
        }
        Ok(())
    }

    /// After a memory access, none of its addressing registers may hold
    /// taints, except a load destination that is also an addressing register.
    pub fn check_addressing_cleared(
        &self,
        record: &InstructionRecord,
    ) -> Result<(), InvariantViolation> {
        let dst = match record.op {
            Operation::Load { dst, .. } => Some(dst),
            _ => None,
        };
        if let Operation::Load { addr_regs, .. } | Operation::Store { addr_regs, .. } = &record.op {
            for &reg in addr_regs {
                if Some(reg) != dst && !self.shadow.register(reg).is_empty() {
                    return Err(InvariantViolation::AddressingRegisterTainted { reg });
                }
            }
        }
        Ok(())
    }
}
