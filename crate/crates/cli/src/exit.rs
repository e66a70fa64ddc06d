use std::fmt;

use sasow_core::Error;

pub const INPUT: u8 = 2;
pub const IO: u8 = 3;
pub const NUMERIC: u8 = 4;

/// A bad flag value caught by the CLI itself.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// 2 for bad input or malformed files, 3 for failed reads and writes,
/// 4 for numeric failures.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return INPUT;
        }
        if cause.is::<std::io::Error>() {
            return IO;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Input(_) | Error::Format { .. } | Error::Prediction(_) => INPUT,
                Error::Io { .. } => IO,
                Error::Numeric(_) => NUMERIC,
            };
        }
    }
    INPUT
}
