mod common;

use clueless::corpus;
use clueless::interp::{assemble, Execution, InterpError, RunConfig};
use clueless::isa::{InstrKind, Operation, TraceItem};
use common::reg;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Replays a run against a memory image rebuilt only from the emitted
/// records. Every load must observe exactly what the records stored at its
/// `ea`, which pins each record's `ea` to the real access address.
fn check_against_shadow_memory(src: &str) -> usize {
    let program = assemble(src).unwrap();
    let mut shadow: HashMap<u64, u8> = program.data.iter().map(|(&a, &b)| (a, b)).collect();
    let mut exec = Execution::new(&program, RunConfig::default());
    let mut checked = 0;
    let mut prev_regs = exec.state().regs;
    while let Some(item) = exec.next() {
        let item = item.unwrap();
        let regs = exec.state().regs;
        if let TraceItem::Instr(r) = item {
            match r.op {
                Operation::Load { dst, ea, size, .. } => {
                    let mut v = 0u64;
                    for k in (0..size as u64).rev() {
                        v = (v << 8) | *shadow.get(&(ea.0 + k)).unwrap_or(&0) as u64;
                    }
                    assert_eq!(regs[dst.index()], v, "load at {ea}");
                    checked += 1;
                }
                Operation::Store { src, ea, size, .. } => {
                    let v = prev_regs[src.index()];
                    for k in 0..size as u64 {
                        shadow.insert(ea.0 + k, (v >> (8 * k)) as u8);
                    }
                    checked += 1;
                }
                _ => {}
            }
        }
        prev_regs = regs;
    }
    let mem = &exec.state().mem;
    for (a, b) in &shadow {
        assert_eq!(mem.get(a).copied().unwrap_or(0), *b, "memory at {a:#x}");
    }
    checked
}

#[test]
fn corpus_eas_match_accesses() {
    for &(name, src) in corpus::ALL {
        assert!(
            check_against_shadow_memory(src) > 0,
            "{name} made no accesses"
        );
    }
}

fn random_program(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from(".org 0x100\nbuf: .byte 1, 2, 3, 4, 5, 6, 7, 8\n");
    out.push_str("li r1, 0x100\nli r2, 0\n");
    for _ in 0..300 {
        let rd = rng.gen_range(3..8);
        let rs = rng.gen_range(2..8);
        let off = rng.gen_range(0..64);
        let sfx = ["b", "h", "w", "d"][rng.gen_range(0..4)];
        let line = match rng.gen_range(0..7) {
            0 => format!("ld{sfx} r{rd}, [r1+{off}]"),
            1 => format!("st{sfx} [r1+{off}], r{rs}"),
            2 => format!("add r{rd}, r{rs}, r{}", rng.gen_range(2..8)),
            3 => format!("ldx{sfx} r{rd}, [r1 + r2*4 + {off}]"),
            4 => format!("stx{sfx} [r1 + r2*2 + {off}], r{rs}"),
            5 => format!("li r2, {}", rng.gen_range(0..8)),
            _ => format!("xor r{rd}, r{rs}, r{}", rng.gen_range(2..8)),
        };
        out.push_str(&line);
        out.push('\n');
    }
    out.push_str("halt\n");
    out
}

#[test]
fn random_programs_eas_match_accesses() {
    for seed in 0..50 {
        check_against_shadow_memory(&random_program(seed));
    }
}

#[test]
fn identical_runs_give_identical_records() {
    for &(_, src) in corpus::ALL {
        let p = assemble(src).unwrap();
        let a: Vec<_> = Execution::new(&p, RunConfig::default()).collect();
        let b: Vec<_> = Execution::new(&p, RunConfig::default()).collect();
        assert_eq!(a, b);
    }
}

#[test]
fn classification_soundness() {
    let p = assemble("li r1, 5\nxor r2, r1, r1\nxor r3, r1, r2\nmv r4, r3\nhalt").unwrap();
    let kinds: Vec<InstrKind> = Execution::new(&p, RunConfig::default())
        .filter_map(|i| match i.unwrap() {
            TraceItem::Instr(r) => Some(r.kind()),
            _ => None,
        })
        .collect();
    use InstrKind::*;
    assert_eq!(kinds, vec![Const, Const, Alu, Alu, Nop]);
}

#[test]
fn micro_loads_hit_the_table_lines() {
    let p = assemble(corpus::MICRO).unwrap();
    let eas: Vec<u64> = Execution::new(&p, RunConfig::default())
        .filter_map(|i| match i.unwrap() {
            TraceItem::Instr(r) => match r.op {
                Operation::Load { ea, addr_regs, .. } if addr_regs.as_slice() == [reg(4)] => {
                    Some(ea.0)
                }
                _ => None,
            },
            _ => None,
        })
        .collect();
    assert_eq!(eas, vec![0x38e0, 0x3320, 0x3560, 0x3960]);
}

#[test]
fn step_limit_stops_runaway_loops() {
    let p = assemble("top: addi r1, r1, 1\njmp top").unwrap();
    let cfg = RunConfig {
        step_limit: 1000,
        mem_bound: None,
    };
    let items: Vec<_> = Execution::new(&p, cfg).collect();
    assert_eq!(items.len(), 1001);
    assert_eq!(
        items.last().unwrap(),
        &Err(InterpError::StepLimitExceeded(1000))
    );
}

#[test]
fn assembler_errors_carry_lines() {
    for (src, line) in [
        ("li r1, 1\nfrob r2\n", 2),
        ("halt\nbne r1, r2, nowhere\n", 2),
        ("x: halt\nhalt\nx: halt\n", 3),
        ("li r99, 1\n", 1),
        (".watch 0x10, 0\n", 1),
    ] {
        assert_eq!(assemble(src).unwrap_err().line, line, "{src:?}");
    }
}
