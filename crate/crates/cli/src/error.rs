use std::fmt;

use dmmia_core::Error as CoreError;

/// Failure kind; decides the exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Config parse or validation failure.
    Config,
    /// An upstream artifact or input file is absent.
    MissingInput,
    /// An artifact was produced by a different configuration or was altered.
    DigestMismatch,
    /// Bad input data or checkpoint content.
    Input,
    /// Numerical failure or I/O while writing.
    Internal,
}

impl Kind {
    pub fn label(self) -> &'static str {
        match self {
            Kind::Config => "config",
            Kind::MissingInput => "missing-input",
            Kind::DigestMismatch => "digest-mismatch",
            Kind::Input => "input",
            Kind::Internal => "internal",
        }
    }

    /// 1 for user errors, 2 for internal ones.
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Internal => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Kind::Config, message)
    }

    pub fn missing(message: impl Into<String>) -> Self {
        Self::new(Kind::MissingInput, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(Kind::Internal, message)
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.kind.label(), self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let kind = match &e {
            CoreError::Config(_) => Kind::Config,
            CoreError::Data(_) | CoreError::Checkpoint(_) | CoreError::Domain { .. } => Kind::Input,
            CoreError::Numerics(_) | CoreError::Diverged { .. } | CoreError::AttackDiverged { .. } => Kind::Internal,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::internal(format!("i/o: {e}"))
    }
}

impl From<dmmia_core::data::DataError> for CliError {
    fn from(e: dmmia_core::data::DataError) -> Self {
        CoreError::from(e).into()
    }
}

impl From<dmmia_core::numerics::NumericsError> for CliError {
    fn from(e: dmmia_core::numerics::NumericsError) -> Self {
        CoreError::from(e).into()
    }
}

pub type CliResult<T> = Result<T, CliError>;
