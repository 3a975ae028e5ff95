//! Stage-tagged failures and their process exit codes.

use std::fmt;

/// Pipeline stage a failure is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Load,
    Score,
    Compare,
    Audit,
    Synth,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Score => "score",
            Stage::Compare => "compare",
            Stage::Audit => "audit",
            Stage::Synth => "synth",
            Stage::Write => "write",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad flags, unreadable or inconsistent configuration.
    Config,
    /// Malformed or inconsistent input data.
    Data,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 1,
            ErrorKind::Data => 2,
        }
    }
}

/// Exit code for a completed run whose audit verdict is a failure.
pub const EXIT_AUDIT_FAIL: i32 = 3;

#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub kind: ErrorKind,
    pub source: anyhow::Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {:#}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {}

impl StageError {
    pub fn new(stage: Stage, kind: ErrorKind, source: impl Into<anyhow::Error>) -> Self {
        Self {
            stage,
            kind,
            source: source.into(),
        }
    }

    pub fn config(stage: Stage, source: impl Into<anyhow::Error>) -> Self {
        Self::new(stage, ErrorKind::Config, source)
    }

    pub fn data(stage: Stage, source: impl Into<anyhow::Error>) -> Self {
        Self::new(stage, ErrorKind::Data, source)
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

/// Attaches a stage and kind to any error convertible into `anyhow::Error`.
pub trait StageExt<T> {
    fn at(self, stage: Stage, kind: ErrorKind) -> Result<T, StageError>;
}

impl<T, E: Into<anyhow::Error>> StageExt<T> for Result<T, E> {
    fn at(self, stage: Stage, kind: ErrorKind) -> Result<T, StageError> {
        self.map_err(|e| StageError::new(stage, kind, e))
    }
}
