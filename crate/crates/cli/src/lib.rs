//! Experiment driver: preprocessing, training runs, sweeps and reports.

pub mod commands;
pub mod report;
pub mod settings;

use wdm_core::Error;

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numerical(_) => EXIT_NUMERICAL,
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. }
        | Error::MalformedInput { .. }
        | Error::Input(_)
        | Error::Dimension(_)
        | Error::Checkpoint(_) => EXIT_INPUT,
    }
}
