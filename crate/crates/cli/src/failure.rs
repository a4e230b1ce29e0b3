//! Error classes and their process exit codes.

use std::fmt;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug)]
pub enum Failure {
    /// Bad flags, configuration or environment values.
    Usage(String),
    /// Inputs that are readable but unusable, including corrupt containers.
    Data(String),
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) => EXIT_DATA,
            Failure::Io(_) => EXIT_IO,
        }
    }

    /// Library error with a short context prefix naming what was being
    /// processed.
    pub fn lib(context: &str, e: roibin::Error) -> Failure {
        let msg = format!("{context}: {e}");
        match &e {
            roibin::Error::Io(_) => Failure::Io(msg),
            roibin::Error::Csv(c) if c.is_io_error() => Failure::Io(msg),
            roibin::Error::Config(_) => Failure::Usage(msg),
            _ => Failure::Data(msg),
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Failure {
        Failure::Io(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Io(m) => f.write_str(m),
        }
    }
}
