//! Reference explicit-flow closure with unbounded resources.
//!
//! Every loaded value gets its own instance number, sets are ordinary
//! `BTreeSet`s and memory is an exact map, so nothing is ever evicted.
//! The tagging and untagging rules mirror the engine's, which makes the two
//! directly comparable on traces where the engine reports no evictions.

use crate::isa::{InstructionRecord, MemAddr, Operation, TraceItem, WatchDirective, NUM_REGISTERS};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use thiserror::Error;

pub const MAX_ORACLE_RECORDS: u64 = 1_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("trace exceeds the oracle limit of {limit} records")]
    TraceTooLarge { limit: u64 },
    #[error("no watch region registered at {0}")]
    UnwatchUnknownRegion(MemAddr),
    #[error("watch region at {0} has zero length")]
    EmptyWatchRegion(MemAddr),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleConfig {
    /// Watch everything and ignore directives.
    pub aggregating: bool,
    /// Power of two.
    pub granularity: u64,
    /// Count only access start addresses into A.
    pub count_starts: bool,
    pub record_limit: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            aggregating: false,
            granularity: 1,
            count_starts: false,
            record_limit: MAX_ORACLE_RECORDS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
pub struct OracleLeak {
    pub leak_point: MemAddr,
    pub transformed_into: MemAddr,
    pub instr_index: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OracleStep {
    pub leaks: Vec<OracleLeak>,
    pub untags: u64,
}

type Instances = BTreeSet<u64>;

#[derive(Debug, Clone)]
pub struct Oracle {
    config: OracleConfig,
    watches: BTreeMap<u64, u64>,
    regs: Vec<Instances>,
    mem: HashMap<u64, Instances>,
    origin: Vec<u64>,
    dead: HashSet<u64>,
    accessed: HashSet<u64>,
    tagged: BTreeSet<u64>,
    instructions: u64,
    sum_a: u128,
    sum_l: u128,
    leaks: Vec<OracleLeak>,
    untags: u64,
}

impl Oracle {
    pub fn new(config: OracleConfig) -> Self {
        assert!(
            config.granularity.is_power_of_two(),
            "granularity must be a power of two"
        );
        Self {
            config,
            watches: BTreeMap::new(),
            regs: vec![Instances::new(); NUM_REGISTERS],
            mem: HashMap::new(),
            origin: Vec::new(),
            dead: HashSet::new(),
            accessed: HashSet::new(),
            tagged: BTreeSet::new(),
            instructions: 0,
            sum_a: 0,
            sum_l: 0,
            leaks: Vec::new(),
            untags: 0,
        }
    }

    fn mask(&self, a: u64) -> u64 {
        a & !(self.config.granularity - 1)
    }

    fn watched(&self, ea: u64) -> bool {
        self.config.aggregating
            || self
                .watches
                .iter()
                .any(|(&base, &len)| ea >= base && (ea - base) < len)
    }

    fn live(&self, set: &Instances) -> Instances {
        set.iter()
            .filter(|t| !self.dead.contains(t))
            .copied()
            .collect()
    }

    pub fn directive(&mut self, d: &WatchDirective) -> Result<(), OracleError> {
        if self.config.aggregating {
            return Ok(());
        }
        match *d {
            WatchDirective::Watch { base, len } => {
                if len == 0 {
                    return Err(OracleError::EmptyWatchRegion(base));
                }
                self.watches.insert(base.0, len);
            }
            WatchDirective::Unwatch { base } => {
                self.watches
                    .remove(&base.0)
                    .ok_or(OracleError::UnwatchUnknownRegion(base))?;
            }
        }
        Ok(())
    }

    pub fn step(&mut self, record: &InstructionRecord) -> Result<OracleStep, OracleError> {
        if self.instructions >= self.config.record_limit {
            return Err(OracleError::TraceTooLarge {
                limit: self.config.record_limit,
            });
        }
        self.instructions += 1;
        let i = self.instructions;
        let mut out = OracleStep::default();

        match &record.op {
            Operation::Load {
                dst,
                addr_regs,
                ea,
                size,
            }
            | Operation::Store {
                src: dst,
                addr_regs,
                ea,
                size,
            } => {
                let is_store = matches!(record.op, Operation::Store { .. });
                let ea = ea.0;
                let mut used = Instances::new();
                for r in addr_regs {
                    used.extend(self.live(&self.regs[r.index()]));
                }
                let data = if is_store {
                    self.live(&self.regs[dst.index()])
                } else {
                    Instances::new()
                };

                if self.config.count_starts {
                    self.accessed.insert(self.mask(ea));
                } else {
                    for k in 0..*size as u64 {
                        self.accessed.insert(self.mask(ea.wrapping_add(k)));
                    }
                }

                for &t in &used {
                    let origin = self.origin[t as usize];
                    self.tagged.insert(origin);
                    out.leaks.push(OracleLeak {
                        leak_point: MemAddr(origin),
                        transformed_into: MemAddr(ea),
                        instr_index: i,
                    });
                }
                self.dead.extend(used.iter().copied());

                let key = self.mask(ea);
                if is_store {
                    if used.is_empty() {
                        let last = self.mask(ea.saturating_add(*size as u64 - 1));
                        let hit: Vec<u64> = self.tagged.range(key..=last).copied().collect();
                        for a in hit {
                            self.tagged.remove(&a);
                            out.untags += 1;
                        }
                    }
                    let kept: Instances = data.difference(&used).copied().collect();
                    if kept.is_empty() {
                        self.mem.remove(&key);
                    } else {
                        self.mem.insert(key, kept);
                    }
                } else {
                    let mut result = Instances::new();
                    if self.watched(ea) {
                        let id = self.origin.len() as u64;
                        self.origin.push(key);
                        result.insert(id);
                    }
                    if let Some(m) = self.mem.get(&key) {
                        result.extend(self.live(m));
                    }
                    self.regs[dst.index()] = result;
                }
            }
            Operation::Alu { dst, srcs } => {
                let mut result = Instances::new();
                for s in srcs {
                    result.extend(self.live(&self.regs[s.index()]));
                }
                self.regs[dst.index()] = result;
            }
            Operation::Const { dst } => self.regs[dst.index()].clear(),
            Operation::Nop => {}
        }

        self.sum_a += self.accessed.len() as u128;
        self.sum_l += self.tagged.len() as u128;
        self.leaks.extend(out.leaks.iter().copied());
        self.untags += out.untags;
        Ok(out)
    }

    pub fn feed(&mut self, item: &TraceItem) -> Result<OracleStep, OracleError> {
        match item {
            TraceItem::Instr(r) => self.step(r),
            TraceItem::Watch(d) => self.directive(d).map(|_| OracleStep::default()),
        }
    }

    pub fn counts(&self) -> (u64, u64) {
        (self.accessed.len() as u64, self.tagged.len() as u64)
    }

    pub fn instructions(&self) -> u64 {
        self.instructions
    }

    pub fn sums(&self) -> (u128, u128) {
        (self.sum_a, self.sum_l)
    }

    pub fn leak_points(&self) -> impl Iterator<Item = MemAddr> + '_ {
        self.tagged.iter().map(|&a| MemAddr(a))
    }

    pub fn leaks(&self) -> &[OracleLeak] {
        &self.leaks
    }

    pub fn untags(&self) -> u64 {
        self.untags
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleResult {
    pub leak_points: BTreeSet<MemAddr>,
    pub leaks: Vec<OracleLeak>,
    pub instructions: u64,
    pub sum_a: u128,
    pub sum_l: u128,
    pub untags: u64,
}

/// Runs the oracle over a whole trace.
pub fn run_oracle<'a>(
    items: impl IntoIterator<Item = &'a TraceItem>,
    config: OracleConfig,
) -> Result<OracleResult, OracleError> {
    let mut o = Oracle::new(config);
    for item in items {
        o.feed(item)?;
    }
    Ok(o.into_result())
}

impl Oracle {
    pub fn into_result(self) -> OracleResult {
        OracleResult {
            leak_points: self.tagged.iter().map(|&a| MemAddr(a)).collect(),
            leaks: self.leaks,
            instructions: self.instructions,
            sum_a: self.sum_a,
            sum_l: self.sum_l,
            untags: self.untags,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::RegisterId;

    fn r(i: usize) -> RegisterId {
        RegisterId::new(i).unwrap()
    }

    fn watch(base: u64, len: u64) -> TraceItem {
        TraceItem::Watch(WatchDirective::Watch {
            base: MemAddr(base),
            len,
        })
    }

    #[test]
    fn table_sequence_tags_both_origins() {
        let (addr_x, addr_y) = (0x100, 0x200);
        let trace = vec![
            watch(addr_x, 1),
            watch(addr_y, 1),
            InstructionRecord::load(r(10), &[r(1)], addr_x, 1).into(),
            InstructionRecord::constant(r(11)).into(),
            InstructionRecord::alu(r(3), &[r(10), r(11)]).into(),
            InstructionRecord::load(r(12), &[r(2)], addr_y, 1).into(),
            InstructionRecord::alu(r(4), &[r(3), r(12)]).into(),
            InstructionRecord::load(r(5), &[r(4)], 0x4000, 1).into(),
        ];
        let res = run_oracle(&trace, OracleConfig::default()).unwrap();
        assert_eq!(
            res.leak_points.into_iter().collect::<Vec<_>>(),
            vec![MemAddr(addr_x), MemAddr(addr_y)]
        );
        assert_eq!(res.leaks.len(), 2);
    }

    #[test]
    fn retired_instances_do_not_leak_twice() {
        let trace = vec![
            InstructionRecord::load(r(1), &[], 0x10, 1).into(),
            InstructionRecord::alu(r(2), &[r(1)]).into(),
            InstructionRecord::load(r(3), &[r(1)], 0x20, 1).into(),
            InstructionRecord::load(r(3), &[r(2)], 0x30, 1).into(),
        ];
        let cfg = OracleConfig {
            aggregating: true,
            ..OracleConfig::default()
        };
        let res = run_oracle(&trace, cfg).unwrap();
        assert_eq!(res.leaks.len(), 1);
    }

    #[test]
    fn store_untags_footprint() {
        let trace = vec![
            InstructionRecord::load(r(1), &[], 0x11, 1).into(),
            InstructionRecord::load(r(2), &[r(1)], 0x40, 1).into(),
            InstructionRecord::store(r(3), &[], 0x10, 4).into(),
        ];
        let cfg = OracleConfig {
            aggregating: true,
            ..OracleConfig::default()
        };
        let res = run_oracle(&trace, cfg).unwrap();
        assert!(res.leak_points.is_empty());
        assert_eq!(res.untags, 1);
    }

    #[test]
    fn spill_and_reload() {
        let trace = vec![
            watch(0x400, 1),
            InstructionRecord::load(r(2), &[], 0x400, 1).into(),
            InstructionRecord::store(r(2), &[], 0x500, 8).into(),
            InstructionRecord::constant(r(2)).into(),
            InstructionRecord::load(r(2), &[], 0x500, 8).into(),
            InstructionRecord::load(r(5), &[r(2)], 0x8000, 1).into(),
        ];
        let res = run_oracle(&trace, OracleConfig::default()).unwrap();
        assert_eq!(
            res.leak_points.into_iter().collect::<Vec<_>>(),
            vec![MemAddr(0x400)]
        );
    }

    #[test]
    fn guard_rejects_oversized_traces() {
        let cfg = OracleConfig {
            record_limit: 3,
            ..OracleConfig::default()
        };
        let trace: Vec<TraceItem> = (0..4).map(|_| InstructionRecord::nop().into()).collect();
        assert_eq!(
            run_oracle(&trace, cfg).unwrap_err(),
            OracleError::TraceTooLarge { limit: 3 }
        );
        assert!(run_oracle(&trace[..3], cfg).is_ok());
    }

    #[test]
    fn unwatch_unknown_region() {
        let mut o = Oracle::new(OracleConfig::default());
        assert!(o
            .directive(&WatchDirective::Unwatch { base: MemAddr(1) })
            .is_err());
    }
}
