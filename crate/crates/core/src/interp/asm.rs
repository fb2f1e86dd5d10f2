//! Two-pass assembler for the toy register machine.
//!
//! ```text
//! ; comment
//!         .org 0x7fff41801683
//! s:      .str "cLUe"
//!         .watch s, 4
//!         li   r1, 0x2020
//! loop:   ldb  r3, [r2+0]
//!         ldx  r5, [r1 + r3*1 + 0]
//!         bne  r3, r0, loop
//!         halt
//! ```
//!
//! A label names a data address when the next item after it is a data
//! directive (`.byte`, `.word`, `.str`), and an instruction index otherwise.

use crate::isa::RegisterId;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {reason}")]
pub struct AsmError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Shr,
}

impl BinOp {
    pub fn apply(self, a: u64, b: u64) -> u64 {
        match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
            BinOp::Shl => a.wrapping_shl(b as u32 & 63),
            BinOp::Shr => a.wrapping_shr(b as u32 & 63),
        }
    }

    fn from_mnemonic(m: &str) -> Option<Self> {
        Some(match m {
            "add" => BinOp::Add,
            "sub" => BinOp::Sub,
            "mul" => BinOp::Mul,
            "and" => BinOp::And,
            "or" => BinOp::Or,
            "xor" => BinOp::Xor,
            "shl" => BinOp::Shl,
            "shr" => BinOp::Shr,
            _ => return None,
        })
    }
}

/// `[base + index*scale + disp]`
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemOperand {
    pub base: Option<RegisterId>,
    pub index: Option<(RegisterId, u64)>,
    pub disp: u64,
}

impl MemOperand {
    pub fn regs(&self) -> impl Iterator<Item = RegisterId> {
        self.base.into_iter().chain(self.index.map(|(r, _)| r))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AsmOp {
    Li {
        rd: RegisterId,
        imm: u64,
    },
    Mv {
        rd: RegisterId,
        rs: RegisterId,
    },
    Bin {
        op: BinOp,
        rd: RegisterId,
        rs1: RegisterId,
        rs2: RegisterId,
    },
    BinImm {
        op: BinOp,
        rd: RegisterId,
        rs: RegisterId,
        imm: u64,
    },
    Load {
        rd: RegisterId,
        mem: MemOperand,
        size: u8,
    },
    Store {
        rs: RegisterId,
        mem: MemOperand,
        size: u8,
    },
    Branch {
        eq: bool,
        rs1: RegisterId,
        rs2: RegisterId,
        target: usize,
    },
    Jmp {
        target: usize,
    },
    Halt,
    Watch {
        base: u64,
        len: u64,
    },
    Unwatch {
        base: u64,
    },
}

impl AsmOp {
    /// Directives occupy a program slot but are not retired instructions.
    pub fn is_directive(&self) -> bool {
        matches!(self, AsmOp::Watch { .. } | AsmOp::Unwatch { .. })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Program {
    pub ops: Vec<AsmOp>,
    /// Source line of each op.
    pub lines: Vec<usize>,
    pub code_labels: BTreeMap<String, usize>,
    pub data_labels: BTreeMap<String, u64>,
    pub data: BTreeMap<u64, u8>,
    /// Routine label covering each op (nearest code label at or before it).
    pub syms: Vec<Option<String>>,
}

impl Program {
    pub fn watch_annotations(&self) -> impl Iterator<Item = &AsmOp> {
        self.ops.iter().filter(|op| op.is_directive())
    }

    pub fn has_watches(&self) -> bool {
        self.ops.iter().any(|op| matches!(op, AsmOp::Watch { .. }))
    }
}

impl fmt::Display for BinOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", format!("{self:?}").to_lowercase())
    }
}

enum Item {
    Op {
        line: usize,
        mnemonic: String,
        args: Vec<String>,
    },
    Data {
        line: usize,
        bytes: Vec<u8>,
    },
    Org(u64),
}

fn err(line: usize, reason: impl Into<String>) -> AsmError {
    AsmError {
        line,
        reason: reason.into(),
    }
}

fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        match c {
            '\\' if in_str && !escaped => {
                escaped = true;
                continue;
            }
            '"' if !escaped => in_str = !in_str,
            ';' if !in_str => return &line[..i],
            _ => {}
        }
        escaped = false;
    }
    line
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_int(s: &str) -> Option<u64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let v = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()?
    } else if body.len() == 3 && body.starts_with('\'') && body.ends_with('\'') {
        body.as_bytes()[1] as u64
    } else {
        body.parse::<u64>().ok()?
    };
    Some(if neg { v.wrapping_neg() } else { v })
}

fn parse_string_literal(s: &str, line: usize) -> Result<Vec<u8>, AsmError> {
    let inner = s
        .strip_prefix('"')
        .and_then(|r| r.strip_suffix('"'))
        .ok_or_else(|| err(line, "expected a quoted string"))?;
    let mut out = Vec::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push(b'\n'),
                Some('0') => out.push(0),
                Some('\\') => out.push(b'\\'),
                Some('"') => out.push(b'"'),
                other => return Err(err(line, format!("bad escape {other:?}"))),
            }
        } else {
            let mut buf = [0; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
        }
    }
    Ok(out)
}

/// Splits operands on top-level commas.
fn split_args(s: &str) -> Vec<String> {
    let s = s.trim();
    if s.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut depth = 0;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    out.push(cur.trim().to_string());
    out
}

struct Resolver<'a> {
    code: &'a BTreeMap<String, usize>,
    data: &'a BTreeMap<String, u64>,
}

impl Resolver<'_> {
    fn reg(&self, s: &str, line: usize) -> Result<RegisterId, AsmError> {
        s.parse().map_err(|e: String| err(line, e))
    }

    fn value(&self, s: &str, line: usize) -> Result<u64, AsmError> {
        if let Some(v) = parse_int(s) {
            return Ok(v);
        }
        if let Some(&a) = self.data.get(s) {
            return Ok(a);
        }
        if let Some(&i) = self.code.get(s) {
            return Ok(i as u64);
        }
        Err(err(line, format!("unresolved symbol `{s}`")))
    }

    fn target(&self, s: &str, line: usize) -> Result<usize, AsmError> {
        self.code
            .get(s)
            .copied()
            .ok_or_else(|| err(line, format!("unresolved target `{s}`")))
    }

    fn mem(&self, s: &str, line: usize, allow_index: bool) -> Result<MemOperand, AsmError> {
        let inner = s
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(|| err(line, format!("expected memory operand, got `{s}`")))?;
        let compact: String = inner.chars().filter(|c| !c.is_whitespace()).collect();
        let mut terms: Vec<(bool, &str)> = Vec::new();
        let mut start = 0;
        let mut neg = false;
        for (i, c) in compact.char_indices() {
            if (c == '+' || c == '-') && i > start {
                terms.push((neg, &compact[start..i]));
                neg = c == '-';
                start = i + 1;
            } else if (c == '+' || c == '-') && i == start {
                neg = c == '-';
                start = i + 1;
            }
        }
        if start < compact.len() {
            terms.push((neg, &compact[start..]));
        }
        let mut op = MemOperand {
            base: None,
            index: None,
            disp: 0,
        };
        for (neg, term) in terms {
            if let Some((r, scale)) = term.split_once('*') {
                if !allow_index {
                    return Err(err(line, "scaled index needs an ldx/stx form"));
                }
                let reg = self.reg(r, line)?;
                let scale =
                    parse_int(scale).ok_or_else(|| err(line, format!("bad scale `{scale}`")))?;
                if neg || op.index.is_some() {
                    return Err(err(line, "only one positive index register allowed"));
                }
                op.index = Some((reg, scale));
            } else if let Ok(reg) = term.parse::<RegisterId>() {
                if neg {
                    return Err(err(line, "registers cannot be subtracted"));
                }
                if op.base.is_none() {
                    op.base = Some(reg);
                } else if allow_index && op.index.is_none() {
                    op.index = Some((reg, 1));
                } else {
                    return Err(err(line, "too many registers in memory operand"));
                }
            } else {
                let v = self.value(term, line)?;
                op.disp = if neg {
                    op.disp.wrapping_sub(v)
                } else {
                    op.disp.wrapping_add(v)
                };
            }
        }
        if allow_index && op.index.is_none() {
            return Err(err(line, "indexed form needs an index register"));
        }
        Ok(op)
    }
}

fn access_size(suffix: &str) -> Option<u8> {
    match suffix {
        "b" => Some(1),
        "h" => Some(2),
        "w" => Some(4),
        "d" | "" => Some(8),
        _ => None,
    }
}

fn expect_args(args: &[String], n: usize, mnemonic: &str, line: usize) -> Result<(), AsmError> {
    if args.len() == n {
        Ok(())
    } else {
        Err(err(
            line,
            format!("`{mnemonic}` takes {n} operands, got {}", args.len()),
        ))
    }
}

fn encode(
    mnemonic: &str,
    args: &[String],
    line: usize,
    r: &Resolver<'_>,
) -> Result<AsmOp, AsmError> {
    let m = mnemonic;
    if let Some(op) = BinOp::from_mnemonic(m) {
        expect_args(args, 3, m, line)?;
        return Ok(AsmOp::Bin {
            op,
            rd: r.reg(&args[0], line)?,
            rs1: r.reg(&args[1], line)?,
            rs2: r.reg(&args[2], line)?,
        });
    }
    let mem_form = |prefix: &str| -> Option<(bool, u8)> {
        let rest = m.strip_prefix(prefix)?;
        let (indexed, suffix) = match rest.strip_prefix('x') {
            Some(s) => (true, s),
            None => (false, rest),
        };
        access_size(suffix).map(|size| (indexed, size))
    };
    Ok(match m {
        "li" => {
            expect_args(args, 2, m, line)?;
            AsmOp::Li {
                rd: r.reg(&args[0], line)?,
                imm: r.value(&args[1], line)?,
            }
        }
        "mv" => {
            expect_args(args, 2, m, line)?;
            AsmOp::Mv {
                rd: r.reg(&args[0], line)?,
                rs: r.reg(&args[1], line)?,
            }
        }
        "addi" | "shli" => {
            expect_args(args, 3, m, line)?;
            AsmOp::BinImm {
                op: if m == "addi" { BinOp::Add } else { BinOp::Shl },
                rd: r.reg(&args[0], line)?,
                rs: r.reg(&args[1], line)?,
                imm: r.value(&args[2], line)?,
            }
        }
        "beq" | "bne" => {
            expect_args(args, 3, m, line)?;
            AsmOp::Branch {
                eq: m == "beq",
                rs1: r.reg(&args[0], line)?,
                rs2: r.reg(&args[1], line)?,
                target: r.target(&args[2], line)?,
            }
        }
        "jmp" => {
            expect_args(args, 1, m, line)?;
            AsmOp::Jmp {
                target: r.target(&args[0], line)?,
            }
        }
        "halt" => {
            expect_args(args, 0, m, line)?;
            AsmOp::Halt
        }
        ".watch" => {
            expect_args(args, 2, m, line)?;
            let len = r.value(&args[1], line)?;
            if len == 0 {
                return Err(err(line, ".watch length must be at least 1"));
            }
            AsmOp::Watch {
                base: r.value(&args[0], line)?,
                len,
            }
        }
        ".unwatch" => {
            expect_args(args, 1, m, line)?;
            AsmOp::Unwatch {
                base: r.value(&args[0], line)?,
            }
        }
        _ => {
            if let Some((indexed, size)) = mem_form("ld") {
                expect_args(args, 2, m, line)?;
                AsmOp::Load {
                    rd: r.reg(&args[0], line)?,
                    mem: r.mem(&args[1], line, indexed)?,
                    size,
                }
            } else if let Some((indexed, size)) = mem_form("st") {
                expect_args(args, 2, m, line)?;
                AsmOp::Store {
                    mem: r.mem(&args[0], line, indexed)?,
                    rs: r.reg(&args[1], line)?,
                    size,
                }
            } else {
                return Err(err(line, format!("unknown mnemonic `{m}`")));
            }
        }
    })
}

fn data_bytes(directive: &str, rest: &str, line: usize) -> Result<Vec<u8>, AsmError> {
    match directive {
        ".str" => parse_string_literal(rest.trim(), line),
        ".byte" | ".word" => {
            let width = if directive == ".byte" { 1 } else { 4 };
            let mut out = Vec::new();
            for v in split_args(rest) {
                let n = parse_int(&v).ok_or_else(|| err(line, format!("bad value `{v}`")))?;
                out.extend_from_slice(&n.to_le_bytes()[..width]);
            }
            if out.is_empty() {
                return Err(err(line, format!("`{directive}` needs at least one value")));
            }
            Ok(out)
        }
        _ => unreachable!(),
    }
}

pub fn assemble(source: &str) -> Result<Program, AsmError> {
    // pass 1: tokenize, bind labels
    let mut items = Vec::new();
    let mut pending: Vec<(String, usize)> = Vec::new();
    let mut code_labels = BTreeMap::new();
    let mut data_labels = BTreeMap::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut op_count = 0usize;
    let mut data_cursor = 0u64;

    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let mut text = strip_comment(raw).trim();
        while let Some((label, rest)) = text.split_once(':') {
            let label = label.trim();
            if !is_ident(label) || label.contains('"') {
                break;
            }
            if let Some(prev) = seen.insert(label.to_string(), line) {
                return Err(err(
                    line,
                    format!("duplicate label `{label}` (first defined on line {prev})"),
                ));
            }
            pending.push((label.to_string(), line));
            text = rest.trim();
        }
        if text.is_empty() {
            continue;
        }
        let (head, rest) = match text.find(char::is_whitespace) {
            Some(i) => (&text[..i], &text[i..]),
            None => (text, ""),
        };
        match head {
            ".org" => {
                let arg = rest.trim();
                data_cursor =
                    parse_int(arg).ok_or_else(|| err(line, format!("bad .org address `{arg}`")))?;
                items.push(Item::Org(data_cursor));
            }
            ".byte" | ".word" | ".str" => {
                let bytes = data_bytes(head, rest, line)?;
                for (l, _) in pending.drain(..) {
                    data_labels.insert(l, data_cursor);
                }
                data_cursor = data_cursor.wrapping_add(bytes.len() as u64);
                items.push(Item::Data { line, bytes });
            }
            _ => {
                for (l, _) in pending.drain(..) {
                    code_labels.insert(l, op_count);
                }
                op_count += 1;
                items.push(Item::Op {
                    line,
                    mnemonic: head.to_ascii_lowercase(),
                    args: split_args(rest),
                });
            }
        }
    }
    for (l, _) in pending.drain(..) {
        code_labels.insert(l, op_count);
    }

    // pass 2: encode
    let resolver = Resolver {
        code: &code_labels,
        data: &data_labels,
    };
    let mut program = Program::default();
    let mut cursor = 0u64;
    let mut owner: BTreeMap<u64, usize> = BTreeMap::new();
    for item in items {
        match item {
            Item::Org(a) => cursor = a,
            Item::Data { line, bytes } => {
                let len = bytes.len() as u64;
                for (k, b) in bytes.into_iter().enumerate() {
                    let addr = cursor.wrapping_add(k as u64);
                    if let Some(prev) = owner.insert(addr, line) {
                        return Err(err(
                            line,
                            format!("data at {addr:#x} overlaps data from line {prev}"),
                        ));
                    }
                    program.data.insert(addr, b);
                }
                cursor = cursor.wrapping_add(len);
            }
            Item::Op {
                line,
                mnemonic,
                args,
            } => {
                let op = encode(&mnemonic, &args, line, &resolver)?;
                program.ops.push(op);
                program.lines.push(line);
            }
        }
    }
    let mut current: Option<String> = None;
    let by_index: BTreeMap<usize, &String> = code_labels.iter().map(|(l, &i)| (i, l)).collect();
    for i in 0..program.ops.len() {
        if let Some(l) = by_index.get(&i) {
            current = Some((*l).clone());
        }
        program.syms.push(current.clone());
    }
    program.code_labels = code_labels;
    program.data_labels = data_labels;
    Ok(program)
}
