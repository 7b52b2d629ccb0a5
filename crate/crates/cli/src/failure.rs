use std::fmt;

use cdsnas::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

/// A command failure with its exit code. Printed as one line:
/// `error code=<n> kind=<kind>: <message>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            kind: "data",
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.message.replace('\n', " ");
        write!(f, "error code={} kind={}: {msg}", self.code, self.kind)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Divergence { .. } | Error::NonFinite(_) => (EXIT_DIVERGED, "diverged"),
            Error::Parse { .. } => (EXIT_DATA, "parse"),
            Error::Checkpoint(_) => (EXIT_DATA, "checkpoint"),
            Error::Io(_) => (EXIT_DATA, "io"),
            Error::ShapeMismatch { .. } | Error::InvalidShape { .. } => (EXIT_DATA, "shape"),
            Error::TooFewInstances { .. } => (EXIT_DATA, "data"),
            _ => (EXIT_DATA, "invalid"),
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}
