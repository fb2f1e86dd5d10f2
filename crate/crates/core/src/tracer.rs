//! Propagation history and the textual trace syntax used in leak diagnostics.
//!
//! Three line forms are produced:
//!
//! ```text
//! 0x7fff41801683 { 0 } -> r3        memory to register (load)
//! r3 { 1, 4 } -> r4                 register to register
//! r2 { 0 } -> 0x500                 register to memory (store)
//! [ r4 { 0 } ] = 0x38e0             register used as a memory address
//! ```

use crate::engine::LeakEvent;
use crate::isa::{MemAddr, RegisterId};
use crate::taint::{TaintId, TaintSet};
use std::borrow::Cow;
use std::collections::VecDeque;

pub const DEFAULT_TRACE_CAPACITY: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PropagationKind {
    LoadAssign,
    RegToReg,
    MemToReg,
    RegToMem,
    AddressUse,
}

/// Where taints moved from and to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Flow {
    /// A fresh taint assigned to the value loaded from `addr`.
    LoadAssign {
        addr: MemAddr,
        dst: RegisterId,
    },
    RegToReg {
        src: RegisterId,
        dst: RegisterId,
    },
    /// Taints inherited from the memory taint cache by a load.
    MemToReg {
        addr: MemAddr,
        dst: RegisterId,
    },
    RegToMem {
        src: RegisterId,
        addr: MemAddr,
    },
    /// `reg` took part in forming the effective address `ea`.
    AddressUse {
        reg: RegisterId,
        ea: MemAddr,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropagationEvent {
    pub flow: Flow,
    pub taints: TaintSet,
    pub instr_index: u64,
    pub pc: Option<MemAddr>,
    pub sym: Option<String>,
}

impl PropagationEvent {
    pub fn kind(&self) -> PropagationKind {
        match self.flow {
            Flow::LoadAssign { .. } => PropagationKind::LoadAssign,
            Flow::RegToReg { .. } => PropagationKind::RegToReg,
            Flow::MemToReg { .. } => PropagationKind::MemToReg,
            Flow::RegToMem { .. } => PropagationKind::RegToMem,
            Flow::AddressUse { .. } => PropagationKind::AddressUse,
        }
    }
}

/// How register indices are spelled in rendered traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegisterNaming {
    /// `r0`, `r1`, ...
    #[default]
    Generic,
    /// x86-64 general purpose registers in encoding order (`rax`, `rcx`,
    /// `rdx`, `rbx`, `rsp`, `rbp`, `rsi`, `rdi`, `r8`..`r15`), for traces
    /// produced from x86 binaries.
    X86_64,
}

const X86_64_NAMES: [&str; 16] = [
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8", "r9", "r10", "r11", "r12", "r13",
    "r14", "r15",
];

impl RegisterNaming {
    pub fn name(self, reg: RegisterId) -> Cow<'static, str> {
        match self {
            RegisterNaming::X86_64 if reg.index() < X86_64_NAMES.len() => {
                Cow::Borrowed(X86_64_NAMES[reg.index()])
            }
            _ => Cow::Owned(reg.to_string()),
        }
    }

    pub fn lookup(self, name: &str) -> Option<RegisterId> {
        match self {
            RegisterNaming::X86_64 => match X86_64_NAMES.iter().position(|n| *n == name) {
                Some(i) => RegisterId::new(i),
                None => name.parse().ok().filter(|r: &RegisterId| r.index() >= 16),
            },
            RegisterNaming::Generic => name.parse().ok(),
        }
    }
}

/// `{ 0 }`, `{ 1, 4 }`
pub fn render_set(set: &TaintSet) -> String {
    let ids: Vec<String> = set.iter().map(|t| t.to_string()).collect();
    format!("{{ {} }}", ids.join(", "))
}

pub fn render(event: &PropagationEvent, naming: RegisterNaming) -> String {
    let set = render_set(&event.taints);
    match event.flow {
        Flow::LoadAssign { addr, dst } | Flow::MemToReg { addr, dst } => {
            format!("{addr} {set} -> {}", naming.name(dst))
        }
        Flow::RegToReg { src, dst } => {
            format!("{} {set} -> {}", naming.name(src), naming.name(dst))
        }
        Flow::RegToMem { src, addr } => format!("{} {set} -> {addr}", naming.name(src)),
        Flow::AddressUse { reg, ea } => format!("[ {} {set} ] = {ea}", naming.name(reg)),
    }
}

#[derive(Debug, Clone)]
struct LoggedLeak {
    event: LeakEvent,
    /// Number of propagation events recorded before the leak.
    position: u64,
}

/// Bounded, instruction-ordered log of propagation events and leaks.
#[derive(Debug, Clone)]
pub struct TraceLog {
    events: VecDeque<PropagationEvent>,
    capacity: usize,
    dropped: u64,
    leaks: Vec<LoggedLeak>,
}

impl Default for TraceLog {
    fn default() -> Self {
        Self::new(DEFAULT_TRACE_CAPACITY)
    }
}

impl TraceLog {
    pub fn new(capacity: usize) -> Self {
        Self {
            events: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
            dropped: 0,
            leaks: Vec::new(),
        }
    }

    pub fn record(&mut self, event: PropagationEvent) {
        if self.capacity == 0 {
            self.dropped += 1;
            return;
        }
        if self.events.len() == self.capacity {
            self.events.pop_front();
            self.dropped += 1;
        }
        self.events.push_back(event);
    }

    pub fn record_leak(&mut self, event: LeakEvent) {
        let position = self.dropped + self.events.len() as u64;
        self.leaks.push(LoggedLeak { event, position });
    }

    pub fn events(&self) -> impl Iterator<Item = &PropagationEvent> {
        self.events.iter()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn leaks(&self) -> impl Iterator<Item = &LeakEvent> {
        self.leaks.iter().map(|l| &l.event)
    }

    /// Renders the retained events, one line each, newline-terminated.
    pub fn render_all(&self, naming: RegisterNaming) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&render(e, naming));
            out.push('\n');
        }
        out
    }

    /// Events up to the leak that carried its taint, back to the load that
    /// assigned it. Returns the slice and whether that load was found.
    fn back_slice(&self, taint: TaintId, position: u64) -> (Vec<PropagationEvent>, bool) {
        let end = position
            .saturating_sub(self.dropped)
            .min(self.events.len() as u64) as usize;
        let mut slice = Vec::new();
        let mut complete = false;
        for e in self.events.range(..end).rev() {
            if !e.taints.contains(taint) {
                continue;
            }
            slice.push(e.clone());
            if e.kind() == PropagationKind::LoadAssign {
                complete = true;
                break;
            }
        }
        slice.reverse();
        (slice, complete)
    }

    pub fn leak_report(&self) -> LeakReport {
        let leaks = self
            .leaks
            .iter()
            .map(|l| {
                let (slice, complete) = self.back_slice(l.event.taint, l.position);
                LeakDiagnostic {
                    leak: l.event.clone(),
                    slice,
                    provenance_complete: complete,
                }
            })
            .collect();
        let assigned_taints = self
            .events
            .iter()
            .filter(|e| e.kind() == PropagationKind::LoadAssign)
            .count() as u64;
        let address_uses = self
            .events
            .iter()
            .filter(|e| e.kind() == PropagationKind::AddressUse)
            .count() as u64;
        LeakReport {
            leaks,
            assigned_taints,
            address_uses,
            trace_drops: self.dropped,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LeakDiagnostic {
    pub leak: LeakEvent,
    /// Propagation events carrying the leaked taint, oldest first.
    pub slice: Vec<PropagationEvent>,
    /// False when the assigning load was no longer in the log.
    pub provenance_complete: bool,
}

#[derive(Debug, Clone)]
pub struct LeakReport {
    pub leaks: Vec<LeakDiagnostic>,
    /// `LoadAssign` events seen in the retained log.
    pub assigned_taints: u64,
    pub address_uses: u64,
    pub trace_drops: u64,
}

impl LeakReport {
    pub fn summary_line(&self) -> String {
        match (self.leaks.len(), self.assigned_taints) {
            (0, 0) => "no watched data was loaded".to_string(),
            (0, n) => {
                format!("{n} watched loads observed; no watched value was used as a memory address")
            }
            (n, _) => format!("{n} leaks: watched values were used as memory addresses"),
        }
    }

    pub fn to_json(&self, naming: RegisterNaming) -> serde_json::Value {
        use serde_json::json;
        let leaks: Vec<_> = self
            .leaks
            .iter()
            .map(|d| {
                json!({
                    "leak_point": d.leak.leak_point,
                    "transformed_into": d.leak.transformed_into,
                    "instr_index": d.leak.instr_index,
                    "taint": d.leak.taint.0,
                    "pc": d.leak.pc,
                    "sym": d.leak.sym,
                    "provenance_complete": d.provenance_complete,
                    "trace": d.slice.iter().map(|e| render(e, naming)).collect::<Vec<_>>(),
                })
            })
            .collect();
        json!({
            "leaks": leaks,
            "leak_count": self.leaks.len(),
            "assigned_taints": self.assigned_taints,
            "address_uses": self.address_uses,
            "trace_drops": self.trace_drops,
            "note": self.summary_line(),
        })
    }
}
