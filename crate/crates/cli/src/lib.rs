//! Command-line front end: configuration, checkpoints, images and the
//! experiment commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod ppm;

use cagn_core::Error;

/// Process exit code for an error: 2 validation, 3 not found, 4 numeric
/// failure, 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::NotFound(_)) => 3,
        Some(Error::Numeric { .. }) => 4,
        _ => 1,
    }
}

/// Thread cap from `CAGN_THREADS` (default 1).
pub fn threads_from_env(value: Option<&str>) -> Result<usize, Error> {
    match value {
        None => Ok(1),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("CAGN_THREADS must be a positive integer, got {:?}", v))),
        },
    }
}
