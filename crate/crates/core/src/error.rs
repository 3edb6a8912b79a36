use thiserror::Error;

use crate::data::DataError;
use crate::models::CheckpointError;
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("attack step {step}: non-finite loss (ce={ce}, imr={imr}, idr={idr})")]
    AttackDiverged { step: usize, ce: f64, imr: f64, idr: f64 },
    #[error("{what}: {reason}")]
    Domain { what: &'static str, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn domain(what: &'static str, reason: impl Into<String>) -> Self {
        Self::Domain {
            what,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
