//! Command-line workflows (train, eval, dictionary, explain) and the HTTP
//! service behind the intervention explorer.

pub mod commands;
pub mod config;
pub mod service;

use lcbm_core::Error;

/// Process exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) => 1,
        Error::Data(_)
        | Error::Ingest { .. }
        | Error::Request(_)
        | Error::Checkpoint(_)
        | Error::Io(_) => 2,
        Error::NonFinite { .. } | Error::Estimator(_) => 3,
    }
}
