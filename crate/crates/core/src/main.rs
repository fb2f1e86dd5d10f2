use clap::{Args, Parser, Subcommand, ValueEnum};
use clueless::engine::{AccessCounting, EngineConfig, Mode};
use clueless::interp::RunConfig;
use clueless::isa::{parse_hex, serialize_item, MemAddr};
use clueless::metrics::DEFAULT_SAMPLE_INTERVAL;
use clueless::session::{
    analyze_reader, oracle_items, program_items, run_program, trace_items, SessionConfig,
    SessionError, WatchSpec,
};
use clueless::tracer::{RegisterNaming, DEFAULT_TRACE_CAPACITY};
use rayon::prelude::*;
use std::fs;
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_USAGE: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_LEAKS: u8 = 3;

#[derive(Parser)]
#[command(
    name = "clueless",
    version,
    about = "Find data values that are turned into memory addresses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble and interpret programs, analyzing the executed instructions.
    Run {
        #[command(flatten)]
        common: Common,
        /// Trap on any access at or above this address.
        #[arg(long, value_parser = parse_num)]
        mem_bound: Option<u64>,
        #[arg(long, value_parser = parse_num, default_value_t = clueless::interp::DEFAULT_STEP_LIMIT)]
        step_limit: u64,
        /// Write the executed record stream in trace syntax.
        #[arg(long, value_name = "PATH")]
        emit_records: Option<PathBuf>,
    },
    /// Analyze a trace file ("-" reads standard input).
    Analyze {
        #[command(flatten)]
        common: Common,
    },
    /// Run the unbounded reference analysis over a trace or a program (`.s`).
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_num, default_value_t = clueless::interp::DEFAULT_STEP_LIMIT)]
        step_limit: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Aggregate,
    Track,
}

#[derive(Clone, Copy, ValueEnum)]
enum CountArg {
    Bytes,
    Starts,
}

#[derive(Clone, Copy, ValueEnum)]
enum NamingArg {
    Generic,
    #[value(name = "x86-64")]
    X86_64,
}

#[derive(Args)]
struct Common {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "track")]
    mode: ModeArg,
    /// Watch region BASE:LEN, repeatable.
    #[arg(long, value_parser = parse_watch, value_name = "ADDR:LEN")]
    watch: Vec<WatchSpec>,
    #[arg(long, value_parser = parse_num, default_value_t = 128)]
    taints: u64,
    #[arg(long, value_parser = parse_num, default_value_t = 256)]
    cache_sets: u64,
    #[arg(long, value_parser = parse_num, default_value_t = 8)]
    cache_ways: u64,
    #[arg(long, value_parser = parse_num, default_value_t = 1)]
    granularity: u64,
    #[arg(long, value_parser = parse_num, default_value_t = DEFAULT_SAMPLE_INTERVAL)]
    sample_interval: u64,
    /// How accesses count towards the accessed-address set.
    #[arg(long, value_enum, default_value = "bytes")]
    a_count: CountArg,
    #[arg(long, value_enum, default_value = "generic")]
    naming: NamingArg,
    #[arg(long, value_parser = parse_num, default_value_t = DEFAULT_TRACE_CAPACITY as u64)]
    trace_capacity: u64,
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    summary: Option<PathBuf>,
    /// Rendered propagation trace.
    #[arg(long, value_name = "PATH")]
    trace_out: Option<PathBuf>,
    /// Leak diagnostics as JSON.
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn parse_num(s: &str) -> Result<u64, String> {
    if s.starts_with("0x") || s.starts_with("0X") {
        parse_hex(s)
    } else {
        s.parse().map_err(|e| format!("`{s}`: {e}"))
    }
}

fn parse_watch(s: &str) -> Result<WatchSpec, String> {
    let (base, len) = s
        .split_once(':')
        .ok_or_else(|| format!("expected ADDR:LEN, got `{s}`"))?;
    let len = parse_num(len)?;
    if len == 0 {
        return Err("watch length must be at least 1".into());
    }
    Ok(WatchSpec {
        base: MemAddr(parse_hex(base)?),
        len,
    })
}

impl Common {
    fn session_config(&self, run: RunConfig) -> Result<SessionConfig, String> {
        let usize_of =
            |v: u64, what: &str| usize::try_from(v).map_err(|_| format!("--{what} is too large"));
        let mode = match self.mode {
            ModeArg::Aggregate => Mode::Aggregating,
            ModeArg::Track => Mode::Tracking,
        };
        let engine = EngineConfig {
            mode,
            taints: usize_of(self.taints, "taints")?,
            cache_sets: usize_of(self.cache_sets, "cache-sets")?,
            cache_ways: usize_of(self.cache_ways, "cache-ways")?,
            granularity: self.granularity,
            access_counting: match self.a_count {
                CountArg::Bytes => AccessCounting::Bytes,
                CountArg::Starts => AccessCounting::Starts,
            },
        };
        engine.validate().map_err(|e| e.to_string())?;
        if self.jobs == 0 {
            return Err("--jobs must be at least 1".into());
        }
        Ok(SessionConfig {
            engine,
            sample_interval: self.sample_interval,
            trace_capacity: usize_of(self.trace_capacity, "trace-capacity")?,
            naming: match self.naming {
                NamingArg::Generic => RegisterNaming::Generic,
                NamingArg::X86_64 => RegisterNaming::X86_64,
            },
            watches: if mode == Mode::Tracking {
                self.watch.clone()
            } else {
                Vec::new()
            },
            run,
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Run,
    Analyze,
    Oracle,
}

enum Failure {
    Usage(String),
    Input(String),
}

impl From<SessionError> for Failure {
    fn from(e: SessionError) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

/// Everything one input produced, written out by the main thread.
struct Produced {
    leaks: u64,
    files: Vec<(Option<PathBuf>, String)>,
    human: String,
}

fn read_input(path: &Path) -> Result<String, Failure> {
    if path == Path::new("-") {
        let mut s = String::new();
        io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| Failure::Input(format!("stdin: {e}")))?;
        Ok(s)
    } else {
        fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
    }
}

fn is_assembly(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "s")
}

struct Outputs<'a> {
    csv: &'a Option<PathBuf>,
    summary: &'a Option<PathBuf>,
    trace_out: &'a Option<PathBuf>,
    report: &'a Option<PathBuf>,
    emit_records: Option<&'a PathBuf>,
}

fn output_path(path: &Path, input: &Path, multi: bool) -> Option<PathBuf> {
    if path == Path::new("-") {
        return None;
    }
    if !multi {
        return Some(path.to_owned());
    }
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "stdin".into());
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(format!(".{stem}"));
    if let Some(ext) = path.extension() {
        name.push(".");
        name.push(ext);
    }
    Some(path.with_file_name(name))
}

fn process(
    kind: Kind,
    input: &Path,
    cfg: &SessionConfig,
    outs: &Outputs<'_>,
    multi: bool,
) -> Result<Produced, Failure> {
    let label = input.display().to_string();
    let mut files = Vec::new();
    let mut push = |target: &Option<PathBuf>, body: String| {
        if let Some(p) = target {
            files.push((output_path(p, input, multi), body));
        }
    };
    let mut human = String::new();
    let leaks;
    match kind {
        Kind::Run | Kind::Analyze => {
            let out = if kind == Kind::Run {
                let source = read_input(input)?;
                if let Some(p) = outs.emit_records {
                    let items = program_items(&source, cfg.run)?;
                    let text: String = items.iter().map(|i| serialize_item(i) + "\n").collect();
                    push(&Some(p.clone()), text);
                }
                run_program(&source, cfg)?
            } else if input == Path::new("-") {
                analyze_reader(io::stdin().lock(), cfg)?
            } else {
                let f =
                    fs::File::open(input).map_err(|e| Failure::Input(format!("{label}: {e}")))?;
                analyze_reader(BufReader::new(f), cfg)?
            };
            push(outs.csv, out.csv());
            push(outs.summary, out.summary_json());
            push(outs.trace_out, out.trace_text());
            push(outs.report, out.report_json());
            leaks = out.leaks();
            let lambda: clueless::ExactLambda = out.metrics.lambda();
            human.push_str(&format!("{label}: {}\n", out.report.summary_line()));
            for d in &out.report.leaks {
                human.push_str(&format!(
                    "  leak {} -> {} at instruction {}{}\n",
                    d.leak.leak_point,
                    d.leak.transformed_into,
                    d.leak.instr_index,
                    d.leak
                        .sym
                        .as_ref()
                        .map(|s| format!(" ({s})"))
                        .unwrap_or_default()
                ));
            }
            human.push_str(&format!(
                "  instructions {}, lambda {} ({})\n",
                out.metrics.instructions(),
                lambda,
                clueless::metrics::six_significant(&lambda)
            ));
        }
        Kind::Oracle => {
            let out = if is_assembly(input) {
                let items = program_items(&read_input(input)?, cfg.run)?;
                oracle_items(items.into_iter().map(Ok), cfg)?
            } else if input == Path::new("-") {
                oracle_items(trace_items(io::stdin().lock()), cfg)?
            } else {
                let f =
                    fs::File::open(input).map_err(|e| Failure::Input(format!("{label}: {e}")))?;
                oracle_items(trace_items(BufReader::new(f)), cfg)?
            };
            push(outs.csv, out.csv());
            push(outs.summary, out.summary_json());
            push(outs.report, out.report_json());
            leaks = out.leaks();
            let lambda: clueless::ExactLambda = out.metrics.lambda();
            human.push_str(&format!(
                "{label}: oracle found {} leaks over {} leak points, lambda {}\n",
                leaks,
                out.oracle.leak_points().count(),
                lambda
            ));
        }
    }
    Ok(Produced {
        leaks,
        files,
        human,
    })
}

fn write_target(path: &Option<PathBuf>, body: &str) -> Result<(), String> {
    match path {
        None => io::stdout()
            .write_all(body.as_bytes())
            .map_err(|e| format!("stdout: {e}")),
        Some(p) => fs::write(p, body).map_err(|e| format!("cannot write {}: {e}", p.display())),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let (kind, common, run, emit) = match &cli.command {
        Command::Run {
            common,
            mem_bound,
            step_limit,
            emit_records,
        } => (
            Kind::Run,
            common,
            RunConfig {
                step_limit: *step_limit,
                mem_bound: *mem_bound,
            },
            emit_records.as_ref(),
        ),
        Command::Analyze { common } => (Kind::Analyze, common, RunConfig::default(), None),
        Command::Oracle { common, step_limit } => (
            Kind::Oracle,
            common,
            RunConfig {
                step_limit: *step_limit,
                mem_bound: None,
            },
            None,
        ),
    };
    let cfg = match common.session_config(run) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    if matches!(common.mode, ModeArg::Aggregate) && !common.watch.is_empty() {
        eprintln!("warning: --watch is ignored in aggregate mode");
    }
    let outs = Outputs {
        csv: &common.csv,
        summary: &common.summary,
        trace_out: &common.trace_out,
        report: &common.report,
        emit_records: emit,
    };
    let to_stdout = [outs.csv, outs.summary, outs.trace_out, outs.report]
        .into_iter()
        .chain(std::iter::once(&outs.emit_records.cloned()))
        .any(|p| p.as_deref() == Some(Path::new("-")));
    let multi = common.inputs.len() > 1;

    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(common.jobs)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let results: Vec<Result<Produced, Failure>> = pool.install(|| {
        common
            .inputs
            .par_iter()
            .map(|input| process(kind, input, &cfg, &outs, multi))
            .collect()
    });

    let mut code = 0u8;
    let mut leaks = 0u64;
    for (input, result) in common.inputs.iter().zip(results) {
        match result {
            Ok(p) => {
                for (target, body) in &p.files {
                    if let Err(e) = write_target(target, body) {
                        eprintln!("error: {e}");
                        code = code.max(EXIT_INPUT);
                    }
                }
                if to_stdout {
                    eprint!("{}", p.human);
                } else {
                    print!("{}", p.human);
                }
                leaks += p.leaks;
            }
            Err(Failure::Usage(msg)) => {
                eprintln!("error: {}: {msg}", input.display());
                code = code.max(EXIT_USAGE);
            }
            Err(Failure::Input(msg)) => {
                eprintln!("error: {}: {msg}", input.display());
                code = EXIT_INPUT;
            }
        }
    }
    if code == 0 && leaks > 0 && cfg.engine.mode == Mode::Tracking {
        code = EXIT_LEAKS;
    }
    ExitCode::from(code)
}
