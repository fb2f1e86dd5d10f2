//! Toy 64-bit register machine: little-endian, byte addressable, sparse
//! memory. Executing a [`Program`] streams normalized
//! [`InstructionRecord`]s with resolved effective addresses, interleaved
//! with the watch directives found along the way.

mod asm;

pub use asm::{assemble, AsmError, AsmOp, BinOp, MemOperand, Program};

use crate::isa::{
    InstructionRecord, MemAddr, RegisterId, TraceItem, WatchDirective, NUM_REGISTERS,
};
use std::collections::HashMap;
use thiserror::Error;

pub const DEFAULT_STEP_LIMIT: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InterpError {
    #[error("trap at pc {pc}: {reason}")]
    Trap { pc: usize, reason: String },
    #[error("step limit of {0} instructions exceeded")]
    StepLimitExceeded(u64),
    #[error("machine is halted")]
    Halted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunConfig {
    pub step_limit: u64,
    /// Accesses must lie entirely below this address when set.
    pub mem_bound: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            step_limit: DEFAULT_STEP_LIMIT,
            mem_bound: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineState {
    pub regs: [u64; NUM_REGISTERS],
    pub mem: HashMap<u64, u8>,
    pub pc: usize,
    pub halted: bool,
    pub step_count: u64,
}

impl MachineState {
    pub fn new(program: &Program) -> Self {
        Self {
            regs: [0; NUM_REGISTERS],
            mem: program.data.iter().map(|(&a, &b)| (a, b)).collect(),
            pc: 0,
            halted: false,
            step_count: 0,
        }
    }

    pub fn reg(&self, r: RegisterId) -> u64 {
        self.regs[r.index()]
    }

    pub fn read(&self, addr: u64, size: u8) -> u64 {
        let mut v = 0u64;
        for k in (0..size as u64).rev() {
            let b = self.mem.get(&addr.wrapping_add(k)).copied().unwrap_or(0);
            v = (v << 8) | b as u64;
        }
        v
    }

    pub fn write(&mut self, addr: u64, size: u8, value: u64) {
        for k in 0..size as u64 {
            self.mem
                .insert(addr.wrapping_add(k), (value >> (8 * k)) as u8);
        }
    }

    fn effective(&self, m: &MemOperand) -> u64 {
        let mut ea = m.disp;
        if let Some(b) = m.base {
            ea = ea.wrapping_add(self.reg(b));
        }
        if let Some((i, scale)) = m.index {
            ea = ea.wrapping_add(self.reg(i).wrapping_mul(scale));
        }
        ea
    }
}

fn check_bounds(pc: usize, ea: u64, size: u8, cfg: &RunConfig) -> Result<(), InterpError> {
    if let Some(bound) = cfg.mem_bound {
        let end = ea as u128 + size as u128;
        if end > bound as u128 {
            return Err(InterpError::Trap {
                pc,
                reason: format!("{size}-byte access at {ea:#x} outside memory bound {bound:#x}"),
            });
        }
    }
    Ok(())
}

/// Executes the op at `state.pc`.
///
/// Directive slots yield a [`TraceItem::Watch`] and do not count as a
/// retired instruction. Everything else yields one record.
pub fn step(
    state: &mut MachineState,
    program: &Program,
    cfg: &RunConfig,
) -> Result<TraceItem, InterpError> {
    if state.halted {
        return Err(InterpError::Halted);
    }
    let pc = state.pc;
    let op = program.ops.get(pc).ok_or(InterpError::Halted)?;
    let mut next = pc + 1;
    let record = match *op {
        AsmOp::Watch { base, len } => {
            state.pc = next;
            return Ok(TraceItem::Watch(WatchDirective::Watch {
                base: MemAddr(base),
                len,
            }));
        }
        AsmOp::Unwatch { base } => {
            state.pc = next;
            return Ok(TraceItem::Watch(WatchDirective::Unwatch {
                base: MemAddr(base),
            }));
        }
        AsmOp::Li { rd, imm } => {
            state.regs[rd.index()] = imm;
            InstructionRecord::constant(rd)
        }
        AsmOp::Mv { rd, rs } => {
            state.regs[rd.index()] = state.reg(rs);
            InstructionRecord::alu(rd, &[rs])
        }
        AsmOp::Bin { op, rd, rs1, rs2 } => {
            state.regs[rd.index()] = op.apply(state.reg(rs1), state.reg(rs2));
            if op == BinOp::Xor && rs1 == rs2 {
                InstructionRecord::constant(rd)
            } else {
                InstructionRecord::alu(rd, &[rs1, rs2])
            }
        }
        AsmOp::BinImm { op, rd, rs, imm } => {
            state.regs[rd.index()] = op.apply(state.reg(rs), imm);
            InstructionRecord::alu(rd, &[rs])
        }
        AsmOp::Load { rd, ref mem, size } => {
            let ea = state.effective(mem);
            check_bounds(pc, ea, size, cfg)?;
            state.regs[rd.index()] = state.read(ea, size);
            let regs: Vec<RegisterId> = mem.regs().collect();
            InstructionRecord::load(rd, &regs, ea, size)
        }
        AsmOp::Store { rs, ref mem, size } => {
            let ea = state.effective(mem);
            check_bounds(pc, ea, size, cfg)?;
            state.write(ea, size, state.reg(rs));
            let regs: Vec<RegisterId> = mem.regs().collect();
            InstructionRecord::store(rs, &regs, ea, size)
        }
        AsmOp::Branch {
            eq,
            rs1,
            rs2,
            target,
        } => {
            if (state.reg(rs1) == state.reg(rs2)) == eq {
                next = target;
            }
            InstructionRecord::nop()
        }
        AsmOp::Jmp { target } => {
            next = target;
            InstructionRecord::nop()
        }
        AsmOp::Halt => {
            state.halted = true;
            InstructionRecord::nop()
        }
    };
    state.pc = next;
    state.step_count += 1;
    let mut record = record.with_pc(pc as u64);
    if let Some(sym) = &program.syms[pc] {
        record = record.with_sym(sym.clone());
    }
    Ok(TraceItem::Instr(record))
}

/// Streams the items of a run. Yields at most one error, then stops.
pub struct Execution<'p> {
    program: &'p Program,
    cfg: RunConfig,
    state: MachineState,
    failed: bool,
}

impl<'p> Execution<'p> {
    pub fn new(program: &'p Program, cfg: RunConfig) -> Self {
        Self {
            program,
            cfg,
            state: MachineState::new(program),
            failed: false,
        }
    }

    pub fn state(&self) -> &MachineState {
        &self.state
    }

    pub fn into_state(self) -> MachineState {
        self.state
    }
}

impl Iterator for Execution<'_> {
    type Item = Result<TraceItem, InterpError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.state.halted {
            return None;
        }
        if self.state.pc >= self.program.ops.len() {
            self.state.halted = true;
            return None;
        }
        let is_directive = self.program.ops[self.state.pc].is_directive();
        if !is_directive && self.state.step_count >= self.cfg.step_limit {
            self.failed = true;
            return Some(Err(InterpError::StepLimitExceeded(self.cfg.step_limit)));
        }
        let item = step(&mut self.state, self.program, &self.cfg);
        self.failed = item.is_err();
        Some(item)
    }
}

/// Runs until `halt`, until control leaves the program, or until the step
/// limit is hit.
pub fn run(
    program: &Program,
    cfg: &RunConfig,
    mut sink: impl FnMut(TraceItem),
) -> Result<MachineState, InterpError> {
    let mut exec = Execution::new(program, *cfg);
    for item in exec.by_ref() {
        sink(item?);
    }
    Ok(exec.into_state())
}

/// Collects the whole output of [`run`].
pub fn run_to_vec(
    program: &Program,
    cfg: &RunConfig,
) -> Result<(MachineState, Vec<TraceItem>), InterpError> {
    let mut items = Vec::new();
    let state = run(program, cfg, |it| items.push(it))?;
    Ok((state, items))
}
