//! Dynamic information-flow tracking for values that turn into memory
//! addresses.
//!
//! Records flow from a trace file or the bundled toy interpreter into an
//! [`Engine`]. It tags the memory locations whose contents are used to form
//! addresses, and [`MetricsAccumulator`] turns the per-instruction set sizes
//! into the leak ratio Λ.

pub mod corpus;
pub mod engine;
pub mod interp;
pub mod isa;
pub mod metrics;
pub mod oracle;
pub mod session;
pub mod taint;
pub mod tracer;

pub use engine::{Engine, EngineConfig, EngineError, Event, LeakEvent, Mode};
pub use isa::{InstructionRecord, MemAddr, Operation, RegisterId, TraceItem, WatchDirective};
pub use metrics::{LambdaScalar, MetricsAccumulator};
pub use session::{Outcome, Session, SessionConfig, SessionError};
pub use taint::{TaintId, TaintSet};

/// Λ as an exact fraction of the two sums.
pub type ExactLambda = num_rational::Ratio<u128>;
/// Λ as a double.
pub type Lambda64 = f64;
/// Λ as a single.
pub type Lambda32 = f32;
