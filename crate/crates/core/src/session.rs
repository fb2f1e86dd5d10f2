//! One analysis run: an engine, its trace log and its metrics, fed from an
//! assembly program or a textual trace. The CLI is a thin layer over this.

use crate::engine::{AccessCounting, Engine, EngineConfig, EngineError, Event, Mode};
use crate::interp::{assemble, AsmError, Execution, InterpError, RunConfig};
use crate::isa::{
    is_skippable, parse_trace_line, InstructionRecord, MemAddr, TraceError, TraceItem,
};
use crate::metrics::{MetricsAccumulator, Summary, DEFAULT_SAMPLE_INTERVAL};
use crate::oracle::{Oracle, OracleConfig, OracleError};
use crate::tracer::{LeakReport, RegisterNaming, TraceLog, DEFAULT_TRACE_CAPACITY};
use serde::Serialize;
use std::io::{self, BufRead};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Asm(#[from] AsmError),
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("tracking mode needs at least one watch region (--watch or an in-band directive)")]
    NoWatchSource,
    #[error("read error: {0}")]
    Io(#[from] io::Error),
}

impl SessionError {
    /// Configuration problems, as opposed to bad input.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            SessionError::NoWatchSource | SessionError::Engine(EngineError::InvalidConfig(_))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WatchSpec {
    pub base: MemAddr,
    pub len: u64,
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub engine: EngineConfig,
    pub sample_interval: u64,
    pub trace_capacity: usize,
    pub naming: RegisterNaming,
    /// Registered before any input is consumed. In-band directives may
    /// later replace or remove them.
    pub watches: Vec<WatchSpec>,
    pub run: RunConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            sample_interval: DEFAULT_SAMPLE_INTERVAL,
            trace_capacity: DEFAULT_TRACE_CAPACITY,
            naming: RegisterNaming::default(),
            watches: Vec::new(),
            run: RunConfig::default(),
        }
    }
}

/// Configuration echoed into the summary document.
#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    #[serde(flatten)]
    pub engine: EngineConfig,
    pub sample_interval: u64,
    pub watches: Vec<WatchSpec>,
}

impl SessionConfig {
    pub fn echo(&self) -> ConfigEcho {
        ConfigEcho {
            engine: self.engine.clone(),
            sample_interval: self.sample_interval,
            watches: if self.engine.mode == Mode::Tracking {
                self.watches.clone()
            } else {
                Vec::new()
            },
        }
    }

    pub fn oracle(&self) -> OracleConfig {
        OracleConfig {
            aggregating: self.engine.mode == Mode::Aggregating,
            granularity: self.engine.granularity,
            count_starts: self.engine.access_counting == AccessCounting::Starts,
            ..OracleConfig::default()
        }
    }
}

pub struct Session {
    engine: Engine,
    log: TraceLog,
    metrics: MetricsAccumulator,
    echo: ConfigEcho,
    naming: RegisterNaming,
    scratch: Vec<Event>,
    saw_watch: bool,
}

impl Session {
    pub fn new(config: &SessionConfig) -> Result<Self, SessionError> {
        let mut engine = Engine::new(config.engine.clone())?;
        for w in &config.watches {
            engine.register_watch(w.base, w.len)?;
        }
        Ok(Self {
            engine,
            log: TraceLog::new(config.trace_capacity),
            metrics: MetricsAccumulator::new(config.sample_interval),
            echo: config.echo(),
            naming: config.naming,
            scratch: Vec::new(),
            saw_watch: !config.watches.is_empty(),
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn metrics(&self) -> &MetricsAccumulator {
        &self.metrics
    }

    pub fn log(&self) -> &TraceLog {
        &self.log
    }

    /// Whether any watch region was ever supplied.
    pub fn saw_watch(&self) -> bool {
        self.saw_watch
    }

    pub fn feed(&mut self, item: &TraceItem) -> Result<&[Event], SessionError> {
        match item {
            TraceItem::Watch(d) => {
                self.saw_watch = true;
                self.engine.apply_directive(d)?;
                self.scratch.clear();
                Ok(&self.scratch)
            }
            TraceItem::Instr(r) => self.feed_record(r),
        }
    }

    /// Applies one instruction and returns the events it produced.
    pub fn feed_record(&mut self, record: &InstructionRecord) -> Result<&[Event], SessionError> {
        record.validate().map_err(SessionError::InvalidRecord)?;
        self.scratch.clear();
        self.engine.step_into(record, &mut self.scratch);
        let mut force = false;
        for ev in &self.scratch {
            match ev {
                Event::Propagation(p) => self.log.record(p.clone()),
                Event::Leak(l) => {
                    self.metrics.stats.leaks += 1;
                    self.log.record_leak(l.clone());
                    force = true;
                }
                Event::Untag { .. } => {
                    self.metrics.stats.untags += 1;
                    force = true;
                }
            }
        }
        let (a, l) = self.engine.snapshot_counts();
        self.metrics.tick(a, l, force);
        Ok(&self.scratch)
    }

    pub fn finish(mut self) -> Outcome {
        let stats = self.engine.stats();
        self.metrics.stats.taint_evictions = stats.taint_evictions;
        self.metrics.stats.cache_evictions = stats.cache_evictions;
        self.metrics.stats.trace_drops = self.log.dropped();
        Outcome {
            report: self.log.leak_report(),
            engine: self.engine,
            log: self.log,
            metrics: self.metrics,
            echo: self.echo,
            naming: self.naming,
        }
    }
}

/// Results of a finished session.
#[derive(Debug)]
pub struct Outcome {
    pub engine: Engine,
    pub log: TraceLog,
    pub metrics: MetricsAccumulator,
    pub report: LeakReport,
    pub echo: ConfigEcho,
    pub naming: RegisterNaming,
}

impl Outcome {
    pub fn leaks(&self) -> u64 {
        self.metrics.stats.leaks
    }

    pub fn summary(&self) -> Summary<ConfigEcho> {
        self.metrics.summary(self.echo.clone())
    }

    pub fn summary_json(&self) -> String {
        self.summary().to_json()
    }

    pub fn csv(&self) -> String {
        self.metrics.to_csv()
    }

    pub fn trace_text(&self) -> String {
        self.log.render_all(self.naming)
    }

    pub fn report_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.report.to_json(self.naming))
            .expect("report serializes");
        s.push('\n');
        s
    }
}

fn require_watch(config: &SessionConfig, saw_watch: bool) -> Result<(), SessionError> {
    if config.engine.mode == Mode::Tracking && !saw_watch {
        Err(SessionError::NoWatchSource)
    } else {
        Ok(())
    }
}

/// Assembles and interprets `source`, analyzing the record stream.
pub fn run_program(source: &str, config: &SessionConfig) -> Result<Outcome, SessionError> {
    let program = assemble(source)?;
    require_watch(config, !config.watches.is_empty() || program.has_watches())?;
    let mut session = Session::new(config)?;
    for item in Execution::new(&program, config.run) {
        session.feed(&item?)?;
    }
    Ok(session.finish())
}

/// Assembles and interprets `source`, returning the trace items it emits.
pub fn program_items(source: &str, run: RunConfig) -> Result<Vec<TraceItem>, SessionError> {
    let program = assemble(source)?;
    Ok(Execution::new(&program, run).collect::<Result<_, _>>()?)
}

/// Streams trace lines from `reader` through a session.
pub fn analyze_reader(
    reader: impl BufRead,
    config: &SessionConfig,
) -> Result<Outcome, SessionError> {
    let mut session = Session::new(config)?;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if is_skippable(&line) {
            continue;
        }
        let item = parse_trace_line(&line, idx + 1)?;
        session.feed(&item)?;
    }
    require_watch(config, session.saw_watch())?;
    Ok(session.finish())
}

pub fn analyze_text(text: &str, config: &SessionConfig) -> Result<Outcome, SessionError> {
    analyze_reader(text.as_bytes(), config)
}

pub fn analyze_items<'a>(
    items: impl IntoIterator<Item = &'a TraceItem>,
    config: &SessionConfig,
) -> Result<Outcome, SessionError> {
    let mut session = Session::new(config)?;
    for item in items {
        session.feed(item)?;
    }
    require_watch(config, session.saw_watch())?;
    Ok(session.finish())
}

/// Oracle counterpart of [`Outcome`], with the same summary and CSV layout.
pub struct OracleOutcome {
    pub oracle: Oracle,
    pub metrics: MetricsAccumulator,
    pub echo: ConfigEcho,
}

impl OracleOutcome {
    pub fn leaks(&self) -> u64 {
        self.metrics.stats.leaks
    }

    pub fn summary_json(&self) -> String {
        self.metrics.summary(self.echo.clone()).to_json()
    }

    pub fn csv(&self) -> String {
        self.metrics.to_csv()
    }

    pub fn report_json(&self) -> String {
        let body = serde_json::json!({
            "leak_points": self.oracle.leak_points().collect::<Vec<_>>(),
            "leaks": self.oracle.leaks(),
            "leak_count": self.oracle.leaks().len(),
        });
        let mut s = serde_json::to_string_pretty(&body).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Runs the unbounded oracle over trace items, with CLI watches applied first.
pub fn oracle_items(
    items: impl IntoIterator<Item = Result<TraceItem, SessionError>>,
    config: &SessionConfig,
) -> Result<OracleOutcome, SessionError> {
    let mut oracle = Oracle::new(config.oracle());
    let mut metrics = MetricsAccumulator::new(config.sample_interval);
    let mut saw_watch = !config.watches.is_empty();
    for w in &config.watches {
        oracle.directive(&crate::isa::WatchDirective::Watch {
            base: w.base,
            len: w.len,
        })?;
    }
    for item in items {
        let item = item?;
        match &item {
            TraceItem::Watch(d) => {
                saw_watch = true;
                oracle.directive(d)?;
            }
            TraceItem::Instr(r) => {
                r.validate().map_err(SessionError::InvalidRecord)?;
                let step = oracle.step(r)?;
                metrics.stats.leaks += step.leaks.len() as u64;
                metrics.stats.untags += step.untags;
                let (a, l) = oracle.counts();
                metrics.tick(a, l, !step.leaks.is_empty() || step.untags > 0);
            }
        }
    }
    require_watch(config, saw_watch)?;
    Ok(OracleOutcome {
        oracle,
        metrics,
        echo: config.echo(),
    })
}

/// Parses trace text lazily for [`oracle_items`].
pub fn trace_items(reader: impl BufRead) -> impl Iterator<Item = Result<TraceItem, SessionError>> {
    reader
        .lines()
        .enumerate()
        .filter_map(|(idx, line)| match line {
            Err(e) => Some(Err(e.into())),
            Ok(l) if is_skippable(&l) => None,
            Ok(l) => Some(parse_trace_line(&l, idx + 1).map_err(Into::into)),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;

    fn track() -> SessionConfig {
        SessionConfig::default()
    }

    #[test]
    fn micro_has_four_leaks() {
        let out = run_program(corpus::MICRO, &track()).unwrap();
        assert_eq!(out.leaks(), 4);
        let targets: Vec<u64> = out
            .report
            .leaks
            .iter()
            .map(|d| d.leak.transformed_into.0)
            .collect();
        assert_eq!(targets[0], 0x38e0);
        assert!(out.report.leaks.iter().all(|d| d.provenance_complete));
    }

    #[test]
    fn tracking_without_watches_is_a_usage_error() {
        let err = run_program("li r1, 1\nhalt", &track()).unwrap_err();
        assert!(err.is_usage());
        let err = analyze_text("kind=const dst=r1\n", &track()).unwrap_err();
        assert!(matches!(err, SessionError::NoWatchSource));
    }

    #[test]
    fn aggregating_needs_no_watches() {
        let cfg = SessionConfig {
            engine: EngineConfig::aggregating(),
            ..SessionConfig::default()
        };
        let out = analyze_text(
            "kind=load dst=r1 ea=0x10 size=1\nkind=load dst=r2 addrregs=r1 ea=0x20 size=1\n",
            &cfg,
        )
        .unwrap();
        assert_eq!((out.metrics.sum_a(), out.metrics.sum_l()), (3, 1));
    }

    #[test]
    fn cli_watch_is_overridden_in_band() {
        let cfg = SessionConfig {
            watches: vec![WatchSpec {
                base: MemAddr(0x10),
                len: 4,
            }],
            ..SessionConfig::default()
        };
        let out = analyze_text("unwatch ea=0x10\nkind=load dst=r1 ea=0x10 size=1\n", &cfg).unwrap();
        assert_eq!(out.report.assigned_taints, 0);
    }

    #[test]
    fn malformed_trace_reports_line() {
        let err = analyze_text("# header\n\nbogus\n", &track()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn oracle_agrees_on_micro() {
        let items = program_items(corpus::MICRO, RunConfig::default()).unwrap();
        let o = oracle_items(items.iter().cloned().map(Ok), &track()).unwrap();
        let e = analyze_items(&items, &track()).unwrap();
        assert_eq!(o.leaks(), 4);
        assert_eq!(o.summary_json(), e.summary_json());
    }
}
