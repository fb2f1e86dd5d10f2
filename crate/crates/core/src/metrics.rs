//! Running sums of `|A_i|` and `|L_i|`, the Λ ratio, sampled series and
//! the CSV / JSON summary outputs.
//!
//! Sums are exact integers. Λ can be evaluated in any [`LambdaScalar`]:
//! `f32`, `f64` or an exact [`Ratio`].

use num_rational::Ratio;
use num_traits::{Num, ToPrimitive};
use serde::Serialize;
use std::fmt::Debug;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const DEFAULT_SAMPLE_INTERVAL: u64 = 4096;

/// Scalar types that Λ can be expressed in.
pub trait LambdaScalar: Num + PartialOrd + Clone + Debug {
    /// `num / den`, with `den > 0`.
    fn from_counts(num: u128, den: u128) -> Self;
}

impl LambdaScalar for f32 {
    fn from_counts(num: u128, den: u128) -> Self {
        f64::from_counts(num, den) as f32
    }
}

impl LambdaScalar for f64 {
    fn from_counts(num: u128, den: u128) -> Self {
        num as f64 / den as f64
    }
}

impl LambdaScalar for Ratio<u128> {
    fn from_counts(num: u128, den: u128) -> Self {
        Ratio::new(num, den)
    }
}

impl LambdaScalar for Ratio<u64> {
    /// Panics if either count does not fit in 64 bits.
    fn from_counts(num: u128, den: u128) -> Self {
        let narrow = |v: u128| u64::try_from(v).expect("count exceeds u64");
        Ratio::new(narrow(num), narrow(den))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Sample {
    pub i: u64,
    pub abs_a: u64,
    pub abs_l: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RunStats {
    pub leaks: u64,
    pub untags: u64,
    pub taint_evictions: u64,
    pub cache_evictions: u64,
    pub trace_drops: u64,
}

#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    instructions: u64,
    sum_a: u128,
    sum_l: u128,
    interval: u64,
    samples: Vec<Sample>,
    pub stats: RunStats,
}

impl Default for MetricsAccumulator {
    fn default() -> Self {
        Self::new(DEFAULT_SAMPLE_INTERVAL)
    }
}

impl MetricsAccumulator {
    /// `interval == 0` disables periodic sampling; forced samples still happen.
    pub fn new(interval: u64) -> Self {
        Self {
            instructions: 0,
            sum_a: 0,
            sum_l: 0,
            interval,
            samples: Vec::new(),
            stats: RunStats::default(),
        }
    }

    /// Accounts one retired instruction. `force` takes a sample regardless
    /// of the interval (the instruction produced a leak or an untag).
    pub fn tick(&mut self, abs_a: u64, abs_l: u64, force: bool) {
        debug_assert!(abs_l <= abs_a, "|L| > |A|");
        self.instructions += 1;
        self.sum_a += abs_a as u128;
        self.sum_l += abs_l as u128;
        let due = self.interval != 0 && self.instructions.is_multiple_of(self.interval);
        if due || force {
            self.samples.push(Sample {
                i: self.instructions,
                abs_a,
                abs_l,
            });
        }
    }

    pub fn instructions(&self) -> u64 {
        self.instructions
    }

    pub fn sum_a(&self) -> u128 {
        self.sum_a
    }

    pub fn sum_l(&self) -> u128 {
        self.sum_l
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// `Σ|L_i| / Σ|A_i|`, or zero when nothing was accessed.
    pub fn lambda<S: LambdaScalar>(&self) -> S {
        if self.sum_a == 0 {
            S::zero()
        } else {
            S::from_counts(self.sum_l, self.sum_a)
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,abs_A,abs_L\n");
        for s in &self.samples {
            out.push_str(&format!("{},{},{}\n", s.i, s.abs_a, s.abs_l));
        }
        out
    }

    pub fn summary<C: Serialize>(&self, config: C) -> Summary<C> {
        let exact: Ratio<u128> = self.lambda();
        Summary {
            lambda: six_significant(&exact),
            lambda_num: *exact.numer(),
            lambda_den: *exact.denom(),
            instructions: self.instructions,
            sum_a: self.sum_a,
            sum_l: self.sum_l,
            leaks: self.stats.leaks,
            untags: self.stats.untags,
            taint_evictions: self.stats.taint_evictions,
            cache_evictions: self.stats.cache_evictions,
            trace_drops: self.stats.trace_drops,
            config,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MetricsError> {
        write_file(path, self.to_csv().as_bytes())
    }

    pub fn write_summary<C: Serialize>(&self, path: &Path, config: C) -> Result<(), MetricsError> {
        write_file(path, self.summary(config).to_json().as_bytes())
    }
}

/// Rounds a ratio to six significant decimal digits.
pub fn six_significant(r: &Ratio<u128>) -> f64 {
    let v = r.to_f64().unwrap_or(0.0);
    if v == 0.0 {
        return 0.0;
    }
    let decimals = (5 - v.abs().log10().floor() as i32).max(0) as usize;
    format!("{v:.decimals$}").parse().unwrap_or(v)
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary<C> {
    pub lambda: f64,
    pub lambda_num: u128,
    pub lambda_den: u128,
    pub instructions: u64,
    #[serde(rename = "sum_A")]
    pub sum_a: u128,
    #[serde(rename = "sum_L")]
    pub sum_l: u128,
    pub leaks: u64,
    pub untags: u64,
    pub taint_evictions: u64,
    pub cache_evictions: u64,
    pub trace_drops: u64,
    pub config: C,
}

impl<C: Serialize> Summary<C> {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), MetricsError> {
    fs::write(path, bytes).map_err(|source| MetricsError::Io {
        path: path.to_owned(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_instruction_trace() {
        let mut acc = MetricsAccumulator::new(1);
        acc.tick(1, 0, false);
        acc.tick(2, 1, true);
        assert_eq!((acc.sum_a(), acc.sum_l()), (3, 1));
        assert_eq!(acc.lambda::<Ratio<u128>>(), Ratio::new(1, 3));
        assert!((acc.lambda::<f64>() - 1.0 / 3.0).abs() < 1e-15);
        assert!((acc.lambda::<f32>() - 1.0 / 3.0).abs() < 1e-7);
        assert_eq!(acc.lambda::<Ratio<u64>>(), Ratio::new(1, 3));
    }

    #[test]
    fn no_accesses_means_zero() {
        let mut acc = MetricsAccumulator::default();
        acc.tick(0, 0, false);
        assert_eq!(acc.sum_l(), 0);
        assert_eq!(acc.lambda::<Ratio<u128>>(), Ratio::from_integer(0));
        assert_eq!(acc.lambda::<f64>(), 0.0);
        let s = acc.summary(());
        assert_eq!((s.lambda_num, s.lambda_den), (0, 1));
    }

    #[test]
    fn interval_one_samples_every_instruction() {
        let mut acc = MetricsAccumulator::new(1);
        for k in 0..10 {
            acc.tick(k, 0, false);
        }
        assert_eq!(acc.samples().len(), 10);
    }

    #[test]
    fn forced_samples_do_not_duplicate() {
        let mut acc = MetricsAccumulator::new(2);
        acc.tick(1, 0, true);
        acc.tick(1, 0, true);
        acc.tick(1, 0, false);
        let is: Vec<u64> = acc.samples().iter().map(|s| s.i).collect();
        assert_eq!(is, vec![1, 2]);
    }

    #[test]
    fn csv_layout() {
        let mut acc = MetricsAccumulator::new(1);
        acc.tick(1, 0, false);
        acc.tick(2, 1, false);
        assert_eq!(acc.to_csv(), "i,abs_A,abs_L\n1,1,0\n2,2,1\n");
    }

    #[test]
    fn summary_fields() {
        let mut acc = MetricsAccumulator::new(1);
        acc.tick(1, 0, false);
        acc.tick(2, 1, false);
        let json: serde_json::Value = serde_json::from_str(&acc.summary(()).to_json()).unwrap();
        assert_eq!(json["lambda"], 0.333333);
        assert_eq!(json["lambda_num"], 1);
        assert_eq!(json["lambda_den"], 3);
        assert_eq!(json["sum_A"], 3);
        assert_eq!(json["sum_L"], 1);
        for key in [
            "instructions",
            "leaks",
            "untags",
            "taint_evictions",
            "cache_evictions",
            "trace_drops",
            "config",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn six_digit_rounding() {
        assert_eq!(six_significant(&Ratio::new(2, 3)), 0.666667);
        assert_eq!(six_significant(&Ratio::new(1, 1)), 1.0);
        assert_eq!(six_significant(&Ratio::new(1, 7000)), 0.000142857);
    }

    #[test]
    fn unwritable_path_is_an_io_error() {
        let acc = MetricsAccumulator::default();
        let err = acc
            .write_csv(Path::new("/nonexistent-dir/x.csv"))
            .unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/x.csv"));
    }

    fn ticks() -> impl Strategy<Value = Vec<(u64, u64)>> {
        prop::collection::vec((0u64..1000, 0u64..1000), 1..50)
            .prop_map(|v| v.into_iter().map(|(a, l)| (a.max(l), a.min(l))).collect())
    }

    proptest! {
        #[test]
        fn lambda_in_unit_interval(ts in ticks()) {
            let mut acc = MetricsAccumulator::new(0);
            for (a, l) in ts { acc.tick(a, l, false); }
            let v: Ratio<u128> = acc.lambda();
            prop_assert!(v <= Ratio::from_integer(1));
        }

        #[test]
        fn concatenation_lies_between(xs in ticks(), ys in ticks()) {
            let run = |ts: &[(u64, u64)]| {
                let mut acc = MetricsAccumulator::new(0);
                for &(a, l) in ts { acc.tick(a, l, false); }
                acc
            };
            let (a, b) = (run(&xs), run(&ys));
            let both = run(&[xs.clone(), ys.clone()].concat());
            prop_assume!(a.sum_a() > 0 && b.sum_a() > 0);
            let (la, lb, lab): (Ratio<u128>, Ratio<u128>, Ratio<u128>) = (a.lambda(), b.lambda(), both.lambda());
            let (lo, hi) = if la <= lb { (la, lb) } else { (lb, la) };
            prop_assert!(lo <= lab && lab <= hi);
        }
    }
}
