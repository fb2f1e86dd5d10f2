//! Normalized dynamic-instruction records and the line-oriented trace format.
//!
//! A trace is UTF-8 text with one item per line:
//!
//! ```text
//! # comment
//! watch ea=0x7fff41801683 len=4
//! kind=load dst=r5 addrregs=r4 ea=0x38e0 size=1
//! kind=store src=r2 addrregs=r1 ea=0x100 size=8
//! kind=alu dst=r3 srcs=r1,r2
//! kind=const dst=r1
//! kind=nop
//! unwatch ea=0x7fff41801683
//! ```
//!
//! Any instruction line may additionally carry `pc=HEX` and `sym=STR`.

use smallvec::SmallVec;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Architectural register count.
pub const NUM_REGISTERS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegisterId(u8);

impl RegisterId {
    pub fn new(index: usize) -> Option<Self> {
        (index < NUM_REGISTERS).then_some(Self(index as u8))
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = RegisterId> {
        (0..NUM_REGISTERS).map(|i| RegisterId(i as u8))
    }
}

impl fmt::Display for RegisterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

impl FromStr for RegisterId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let digits = s
            .strip_prefix('r')
            .ok_or_else(|| format!("unknown register `{s}`"))?;
        // reject "r01", "r+1" and friends so the text form stays canonical
        if digits.is_empty()
            || !digits.bytes().all(|b| b.is_ascii_digit())
            || (digits.len() > 1 && digits.starts_with('0'))
        {
            return Err(format!("unknown register `{s}`"));
        }
        digits
            .parse::<usize>()
            .ok()
            .and_then(RegisterId::new)
            .ok_or_else(|| format!("unknown register `{s}`"))
    }
}

/// A byte address. Addresses are opaque keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct MemAddr(pub u64);

impl MemAddr {
    #[inline]
    pub fn value(self) -> u64 {
        self.0
    }
}

impl fmt::Display for MemAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

impl From<u64> for MemAddr {
    fn from(v: u64) -> Self {
        MemAddr(v)
    }
}

impl serde::Serialize for MemAddr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Parses a hexadecimal number with an optional `0x` prefix.
pub fn parse_hex(s: &str) -> Result<u64, String> {
    let digits = s
        .strip_prefix("0x")
        .or_else(|| s.strip_prefix("0X"))
        .unwrap_or(s);
    if digits.is_empty() {
        return Err(format!("empty hex value `{s}`"));
    }
    u64::from_str_radix(digits, 16).map_err(|_| format!("bad hex value `{s}`"))
}

/// Registers that took part in forming an effective address (base, index).
pub type AddrRegs = SmallVec<[RegisterId; 2]>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InstrKind {
    Load,
    Store,
    Alu,
    Const,
    Nop,
}

impl InstrKind {
    fn keyword(self) -> &'static str {
        match self {
            InstrKind::Load => "load",
            InstrKind::Store => "store",
            InstrKind::Alu => "alu",
            InstrKind::Const => "const",
            InstrKind::Nop => "nop",
        }
    }
}

/// The operation part of a record. Each variant only carries the fields
/// that are meaningful for its kind.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Operation {
    Load {
        dst: RegisterId,
        addr_regs: AddrRegs,
        ea: MemAddr,
        size: u8,
    },
    Store {
        src: RegisterId,
        addr_regs: AddrRegs,
        ea: MemAddr,
        size: u8,
    },
    /// Register-to-register computation; `srcs` is never empty.
    Alu {
        dst: RegisterId,
        srcs: SmallVec<[RegisterId; 3]>,
    },
    /// The destination is set to a value independent of any register.
    Const {
        dst: RegisterId,
    },
    Nop,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct InstructionRecord {
    pub op: Operation,
    pub pc: Option<MemAddr>,
    pub sym: Option<String>,
}

impl InstructionRecord {
    pub fn new(op: Operation) -> Self {
        Self {
            op,
            pc: None,
            sym: None,
        }
    }

    pub fn kind(&self) -> InstrKind {
        match self.op {
            Operation::Load { .. } => InstrKind::Load,
            Operation::Store { .. } => InstrKind::Store,
            Operation::Alu { .. } => InstrKind::Alu,
            Operation::Const { .. } => InstrKind::Const,
            Operation::Nop => InstrKind::Nop,
        }
    }

    pub fn load(dst: RegisterId, addr_regs: &[RegisterId], ea: u64, size: u8) -> Self {
        Self::new(Operation::Load {
            dst,
            addr_regs: addr_regs.iter().copied().collect(),
            ea: MemAddr(ea),
            size,
        })
    }

    pub fn store(src: RegisterId, addr_regs: &[RegisterId], ea: u64, size: u8) -> Self {
        Self::new(Operation::Store {
            src,
            addr_regs: addr_regs.iter().copied().collect(),
            ea: MemAddr(ea),
            size,
        })
    }

    pub fn alu(dst: RegisterId, srcs: &[RegisterId]) -> Self {
        assert!(!srcs.is_empty(), "alu records need at least one source");
        Self::new(Operation::Alu {
            dst,
            srcs: srcs.iter().copied().collect(),
        })
    }

    pub fn constant(dst: RegisterId) -> Self {
        Self::new(Operation::Const { dst })
    }

    pub fn nop() -> Self {
        Self::new(Operation::Nop)
    }

    pub fn with_pc(mut self, pc: u64) -> Self {
        self.pc = Some(MemAddr(pc));
        self
    }

    pub fn with_sym(mut self, sym: impl Into<String>) -> Self {
        self.sym = Some(sym.into());
        self
    }

    /// Checks the structural invariants that the variant types cannot express.
    pub fn validate(&self) -> Result<(), String> {
        match &self.op {
            Operation::Load {
                addr_regs, size, ..
            }
            | Operation::Store {
                addr_regs, size, ..
            } => {
                if !matches!(size, 1 | 2 | 4 | 8) {
                    return Err(format!("size must be 1, 2, 4 or 8, got {size}"));
                }
                if addr_regs.len() > 2 {
                    return Err("at most two addressing registers".into());
                }
            }
            Operation::Alu { srcs, .. } if srcs.is_empty() => {
                return Err("alu needs at least one source".into());
            }
            _ => {}
        }
        if let Some(sym) = &self.sym {
            if sym.is_empty() || sym.chars().any(char::is_whitespace) {
                return Err("sym must be a non-empty token without whitespace".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WatchDirective {
    Watch { base: MemAddr, len: u64 },
    Unwatch { base: MemAddr },
}

/// One parsed trace line.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TraceItem {
    Instr(InstructionRecord),
    Watch(WatchDirective),
}

impl From<InstructionRecord> for TraceItem {
    fn from(r: InstructionRecord) -> Self {
        TraceItem::Instr(r)
    }
}

impl From<WatchDirective> for TraceItem {
    fn from(w: WatchDirective) -> Self {
        TraceItem::Watch(w)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("line {lineno}: {reason}")]
    MalformedLine { lineno: usize, reason: String },
}

struct Fields<'a> {
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    fn parse(tokens: impl Iterator<Item = &'a str>) -> Result<Self, String> {
        let mut pairs: Vec<(&str, &str)> = Vec::new();
        for tok in tokens {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got `{tok}`"))?;
            if pairs.iter().any(|(seen, _)| *seen == k) {
                return Err(format!("duplicate key `{k}`"));
            }
            pairs.push((k, v));
        }
        Ok(Self { pairs })
    }

    fn take(&mut self, key: &str) -> Option<&'a str> {
        let pos = self.pairs.iter().position(|(k, _)| *k == key)?;
        Some(self.pairs.remove(pos).1)
    }

    fn require(&mut self, key: &str) -> Result<&'a str, String> {
        self.take(key)
            .ok_or_else(|| format!("missing mandatory key `{key}`"))
    }

    fn finish(self) -> Result<(), String> {
        match self.pairs.first() {
            Some((k, _)) => Err(format!("unknown key `{k}`")),
            None => Ok(()),
        }
    }
}

fn parse_reg_list<A: smallvec::Array<Item = RegisterId>>(s: &str) -> Result<SmallVec<A>, String> {
    if s.is_empty() {
        return Ok(SmallVec::new());
    }
    s.split(',').map(RegisterId::from_str).collect()
}

fn parse_size(s: &str) -> Result<u8, String> {
    match s.parse::<u8>() {
        Ok(v @ (1 | 2 | 4 | 8)) => Ok(v),
        _ => Err(format!("size must be 1, 2, 4 or 8, got `{s}`")),
    }
}

fn parse_line_inner(line: &str) -> Result<TraceItem, String> {
    let mut tokens = line.split_whitespace();
    let head = tokens.next().ok_or("empty line")?;
    match head {
        "watch" => {
            let mut f = Fields::parse(tokens)?;
            let base = parse_hex(f.require("ea")?)?;
            let len: u64 = f
                .require("len")?
                .parse()
                .map_err(|_| "len must be a decimal integer".to_string())?;
            f.finish()?;
            if len == 0 {
                return Err("watch len must be at least 1".into());
            }
            Ok(TraceItem::Watch(WatchDirective::Watch {
                base: MemAddr(base),
                len,
            }))
        }
        "unwatch" => {
            let mut f = Fields::parse(tokens)?;
            let base = parse_hex(f.require("ea")?)?;
            f.finish()?;
            Ok(TraceItem::Watch(WatchDirective::Unwatch {
                base: MemAddr(base),
            }))
        }
        _ => {
            let mut f = Fields::parse(std::iter::once(head).chain(tokens))?;
            let kind = f.require("kind")?;
            let op = match kind {
                "load" | "store" => {
                    let reg = if kind == "load" {
                        f.require("dst")?
                    } else {
                        f.require("src")?
                    };
                    let reg = RegisterId::from_str(reg)?;
                    let addr_regs: AddrRegs = match f.take("addrregs") {
                        Some(s) => parse_reg_list(s)?,
                        None => SmallVec::new(),
                    };
                    if addr_regs.len() > 2 {
                        return Err("at most two addressing registers".into());
                    }
                    let ea = MemAddr(parse_hex(f.require("ea")?)?);
                    let size = parse_size(f.require("size")?)?;
                    if kind == "load" {
                        Operation::Load {
                            dst: reg,
                            addr_regs,
                            ea,
                            size,
                        }
                    } else {
                        Operation::Store {
                            src: reg,
                            addr_regs,
                            ea,
                            size,
                        }
                    }
                }
                "alu" => {
                    let dst = RegisterId::from_str(f.require("dst")?)?;
                    let srcs = parse_reg_list(f.require("srcs")?)?;
                    if srcs.is_empty() {
                        return Err("alu needs at least one source".into());
                    }
                    Operation::Alu { dst, srcs }
                }
                "const" => Operation::Const {
                    dst: RegisterId::from_str(f.require("dst")?)?,
                },
                "nop" => Operation::Nop,
                other => return Err(format!("unknown kind `{other}`")),
            };
            let pc = f.take("pc").map(parse_hex).transpose()?.map(MemAddr);
            let sym = f.take("sym").map(str::to_owned);
            if matches!(sym.as_deref(), Some("")) {
                return Err("empty sym".into());
            }
            f.finish()?;
            Ok(TraceItem::Instr(InstructionRecord { op, pc, sym }))
        }
    }
}

/// Parses a single non-empty, non-comment trace line.
pub fn parse_trace_line(line: &str, lineno: usize) -> Result<TraceItem, TraceError> {
    parse_line_inner(line).map_err(|reason| TraceError::MalformedLine { lineno, reason })
}

/// Returns true for lines the trace grammar ignores (blank lines and comments).
pub fn is_skippable(line: &str) -> bool {
    let t = line.trim_start();
    t.is_empty() || t.starts_with('#')
}

/// Lazily parses a whole trace, numbering lines from 1.
pub fn parse_trace(text: &str) -> impl Iterator<Item = Result<TraceItem, TraceError>> + '_ {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !is_skippable(l))
        .map(|(i, l)| parse_trace_line(l, i + 1))
}

fn join_regs(regs: &[RegisterId]) -> String {
    regs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Renders a record in the canonical trace form.
pub fn serialize(record: &InstructionRecord) -> String {
    let mut out = format!("kind={}", record.kind().keyword());
    match &record.op {
        Operation::Load {
            dst: reg,
            addr_regs,
            ea,
            size,
        }
        | Operation::Store {
            src: reg,
            addr_regs,
            ea,
            size,
        } => {
            let key = if record.kind() == InstrKind::Load {
                "dst"
            } else {
                "src"
            };
            out.push_str(&format!(" {key}={reg}"));
            if !addr_regs.is_empty() {
                out.push_str(&format!(" addrregs={}", join_regs(addr_regs)));
            }
            out.push_str(&format!(" ea={ea} size={size}"));
        }
        Operation::Alu { dst, srcs } => {
            out.push_str(&format!(" dst={dst} srcs={}", join_regs(srcs)));
        }
        Operation::Const { dst } => out.push_str(&format!(" dst={dst}")),
        Operation::Nop => {}
    }
    if let Some(pc) = record.pc {
        out.push_str(&format!(" pc={pc}"));
    }
    if let Some(sym) = &record.sym {
        out.push_str(&format!(" sym={sym}"));
    }
    out
}

pub fn serialize_directive(d: &WatchDirective) -> String {
    match d {
        WatchDirective::Watch { base, len } => format!("watch ea={base} len={len}"),
        WatchDirective::Unwatch { base } => format!("unwatch ea={base}"),
    }
}

pub fn serialize_item(item: &TraceItem) -> String {
    match item {
        TraceItem::Instr(r) => serialize(r),
        TraceItem::Watch(d) => serialize_directive(d),
    }
}
