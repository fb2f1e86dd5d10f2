#![allow(dead_code)]

use clueless::engine::{EngineConfig, Mode};
use clueless::isa::{InstructionRecord, MemAddr, RegisterId, TraceItem, WatchDirective};
use clueless::oracle::{run_oracle, OracleResult};
use clueless::session::{analyze_items, Outcome, SessionConfig};
use clueless::ExactLambda;
use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ADDR_BASE: u64 = 0x1000;
pub const NUM_ADDRS: u64 = 256;
pub const NUM_REGS: usize = 16;

pub fn reg(i: usize) -> RegisterId {
    RegisterId::new(i).unwrap()
}

/// A seeded synthetic trace over 16 registers and 256 addresses.
#[derive(Debug, Clone)]
pub struct RandomTrace {
    pub seed: u64,
    pub mode: Mode,
    pub items: Vec<TraceItem>,
}

pub fn random_trace(seed: u64, max_len: usize) -> RandomTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.gen_range(1..=max_len);
    let mode = if rng.gen_bool(0.5) {
        Mode::Aggregating
    } else {
        Mode::Tracking
    };
    let mut items = Vec::with_capacity(len + 8);
    let mut watched: Vec<u64> = Vec::new();
    let new_watch = |rng: &mut ChaCha8Rng, items: &mut Vec<TraceItem>, watched: &mut Vec<u64>| {
        let base = ADDR_BASE + rng.gen_range(0..NUM_ADDRS);
        let len = rng.gen_range(1..=32);
        if !watched.contains(&base) {
            watched.push(base);
        }
        items.push(TraceItem::Watch(WatchDirective::Watch {
            base: MemAddr(base),
            len,
        }));
    };
    if mode == Mode::Tracking {
        for _ in 0..rng.gen_range(1..=4) {
            new_watch(&mut rng, &mut items, &mut watched);
        }
    }
    let r = |rng: &mut ChaCha8Rng| reg(rng.gen_range(0..NUM_REGS));
    let addr_regs = |rng: &mut ChaCha8Rng| -> Vec<RegisterId> {
        let n = *[0usize, 1, 1, 1, 2].choose(rng).unwrap();
        (0..n).map(|_| reg(rng.gen_range(0..NUM_REGS))).collect()
    };
    let mut records = 0;
    while records < len {
        let ea = ADDR_BASE + rng.gen_range(0..NUM_ADDRS);
        let size = *[1u8, 2, 4, 8].choose(&mut rng).unwrap();
        let roll = rng.gen_range(0..100);
        let rec = match roll {
            0..=34 => InstructionRecord::load(r(&mut rng), &addr_regs(&mut rng), ea, size),
            35..=59 => InstructionRecord::store(r(&mut rng), &addr_regs(&mut rng), ea, size),
            60..=84 => {
                let n = rng.gen_range(1..=3);
                let srcs: Vec<RegisterId> = (0..n).map(|_| r(&mut rng)).collect();
                InstructionRecord::alu(r(&mut rng), &srcs)
            }
            85..=96 => InstructionRecord::constant(r(&mut rng)),
            _ => {
                if mode == Mode::Tracking && rng.gen_bool(0.3) {
                    if !watched.is_empty() && rng.gen_bool(0.5) {
                        let base = watched.swap_remove(rng.gen_range(0..watched.len()));
                        items.push(TraceItem::Watch(WatchDirective::Unwatch {
                            base: MemAddr(base),
                        }));
                    } else {
                        new_watch(&mut rng, &mut items, &mut watched);
                    }
                }
                InstructionRecord::nop()
            }
        };
        items.push(rec.into());
        records += 1;
    }
    RandomTrace { seed, mode, items }
}

pub fn session_config(mode: Mode, taints: usize, sets: usize, ways: usize) -> SessionConfig {
    SessionConfig {
        engine: EngineConfig {
            mode,
            taints,
            cache_sets: sets,
            cache_ways: ways,
            ..EngineConfig::default()
        },
        sample_interval: 0,
        ..SessionConfig::default()
    }
}

pub fn engine_run(items: &[TraceItem], cfg: &SessionConfig) -> Outcome {
    analyze_items(items, cfg).expect("engine run")
}

pub fn oracle_run(items: &[TraceItem], cfg: &SessionConfig) -> OracleResult {
    run_oracle(items, cfg.oracle()).expect("oracle run")
}

pub fn oracle_lambda(o: &OracleResult) -> ExactLambda {
    if o.sum_a == 0 {
        Ratio::from_integer(0)
    } else {
        Ratio::new(o.sum_l, o.sum_a)
    }
}

/// `(leak_point, transformed_into, instr_index)` for every leak, sorted.
pub fn engine_leaks(out: &Outcome) -> Vec<(u64, u64, u64)> {
    let mut v: Vec<_> = out
        .log
        .leaks()
        .map(|l| (l.leak_point.0, l.transformed_into.0, l.instr_index))
        .collect();
    v.sort();
    v
}

pub fn oracle_leaks(o: &OracleResult) -> Vec<(u64, u64, u64)> {
    let mut v: Vec<_> = o
        .leaks
        .iter()
        .map(|l| (l.leak_point.0, l.transformed_into.0, l.instr_index))
        .collect();
    v.sort();
    v
}

/// Compares engine and oracle results. `Err` describes the first mismatch.
pub fn compare(out: &Outcome, o: &OracleResult) -> Result<(), String> {
    let engine_points: Vec<MemAddr> = out.engine.leak_points().collect();
    let oracle_points: Vec<MemAddr> = o.leak_points.iter().copied().collect();
    if engine_points != oracle_points {
        return Err(format!(
            "final leak points differ: {engine_points:?} vs {oracle_points:?}"
        ));
    }
    if engine_leaks(out) != oracle_leaks(o) {
        return Err("leak event lists differ".into());
    }
    if (out.metrics.sum_a(), out.metrics.sum_l()) != (o.sum_a, o.sum_l) {
        return Err(format!(
            "sums differ: engine ({}, {}) oracle ({}, {})",
            out.metrics.sum_a(),
            out.metrics.sum_l(),
            o.sum_a,
            o.sum_l
        ));
    }
    if out.metrics.instructions() != o.instructions {
        return Err("instruction counts differ".into());
    }
    Ok(())
}

pub fn instr_records(items: &[TraceItem]) -> impl Iterator<Item = &InstructionRecord> {
    items.iter().filter_map(|it| match it {
        TraceItem::Instr(r) => Some(r),
        TraceItem::Watch(_) => None,
    })
}

/// Single-byte watches on the two table addresses.
pub fn table_watch_items(addr_x: u64, addr_y: u64) -> Vec<TraceItem> {
    [addr_x, addr_y]
        .into_iter()
        .map(|base| {
            TraceItem::Watch(WatchDirective::Watch {
                base: MemAddr(base),
                len: 1,
            })
        })
        .collect()
}
