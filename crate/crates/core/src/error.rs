use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation angle is π: logarithm axis is ambiguous")]
    AngleAmbiguity,

    #[error("invalid pose graph: {0}")]
    InvalidGraph(String),

    #[error("pose graph is disconnected from the fixed node; unreachable nodes: {}", format_ids(.nodes))]
    Disconnected { nodes: Vec<usize> },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("depth frame {frame}: {message}")]
    DimensionMismatch { frame: usize, message: String },

    #[error("trajectory has no pose for frame {0}")]
    MissingPose(usize),

    #[error("unknown fragment id {0}")]
    UnknownFragment(usize),

    #[error("loop {0} has no ground-truth label")]
    UnlabeledLoop(usize),
}

/// Broad failure classes, used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Parse,
    Numeric,
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Parse => 2,
            ErrorClass::Numeric => 3,
            ErrorClass::Io => 4,
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::AngleAmbiguity | Error::Disconnected { .. } | Error::Numeric(_) => {
                ErrorClass::Numeric
            }
            Error::Io { .. } => ErrorClass::Io,
            _ => ErrorClass::Parse,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl std::fmt::Display, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_string(),
            line,
            message: message.into(),
        }
    }
}

fn format_ids(ids: &[usize]) -> String {
    const SHOWN: usize = 16;
    let mut s = ids
        .iter()
        .take(SHOWN)
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    if ids.len() > SHOWN {
        s.push_str(&format!(", … ({} total)", ids.len()));
    }
    s
}
