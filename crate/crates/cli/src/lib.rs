//! Command-line front end: simulate plans, search for plans, replay
//! availability traces, fit bandwidth curves and generate fixtures.
//!
//! Every command prints one JSON document on stdout (or writes it to
//! `--out`). Failures print a JSON error object on stderr and exit with
//! 2 (validation), 3 (missing data), 4 (infeasible) or 5 (internal).

pub mod cli;
pub mod error;
pub mod replan;
pub mod trace;

pub use cli::{run, Cli, Command};
pub use error::{CliError, ErrorKind};
pub use replan::{replay, ReplanEntry, ReplanLog};
pub use trace::{load_trace, synthetic_trace, AvailabilityTrace, TraceEvent};
