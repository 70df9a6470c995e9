//! Command failures with their exit codes.

use std::fmt;

/// Exit status of a user or input error.
pub const EXIT_USER: i32 = 1;
/// Exit status of a broken internal invariant.
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    /// Short machine-readable category, e.g. `config` or `data`.
    pub kind: &'static str,
    pub message: String,
}

pub type CliResult<T> = std::result::Result<T, Failure>;

impl Failure {
    pub fn user(kind: &'static str, message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USER,
            kind,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INTERNAL,
            kind: "internal",
            message: message.into(),
        }
    }

    /// Single line `error[kind]: message` with newlines folded.
    pub fn line(&self) -> String {
        let msg = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error[{}]: {msg}", self.kind)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl From<leafnet::Error> for Failure {
    fn from(e: leafnet::Error) -> Self {
        use leafnet::Error as E;
        let kind = match &e {
            E::Graph(_) | E::NoRunningStats(_) => return Failure::internal(e.to_string()),
            E::Decode { .. } => "decode",
            E::CorruptHeader(_) | E::ShapeMismatch { .. } | E::UnknownVersion(_) => "checkpoint",
            E::NonFinite { .. } | E::NonFiniteValues(_) => "diverged",
            E::Io(_) => "io",
            E::Fold { .. } => "fold",
            _ => "invalid",
        };
        Failure::user(kind, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::user("io", e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::internal(format!("JSON encoding failed: {e}"))
    }
}

/// Attaches a path to IO errors.
pub trait IoContext<T> {
    fn at(self, path: &std::path::Path) -> CliResult<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> CliResult<T> {
        self.map_err(|e| Failure::user("io", format!("{}: {e}", path.display())))
    }
}
