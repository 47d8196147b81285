//! Subcommands of the `landmark` binary. Every command writes only below
//! `<run root>/<run name>/<stage>/` and returns a JSON summary line.

pub mod commands;
pub mod config;

use landmark_core::Error;

/// Environment variable overriding the `runs` directory.
pub const RUN_ROOT_ENV: &str = "LANDMARK_RUN_ROOT";

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_ARTIFACT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
/// Anything else: bad input data, io failures.
pub const EXIT_OTHER: i32 = 1;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::MissingArtifact(_) => EXIT_MISSING_ARTIFACT,
        Error::NonFinite { .. } | Error::Degenerate(_) => EXIT_NUMERIC,
        _ => EXIT_OTHER,
    }
}
