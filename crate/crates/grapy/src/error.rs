use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::labels::LabelError;
use crate::netpbm::NetpbmError;
use crate::params::ParamError;
use crate::taxonomy::TaxonomyError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Netpbm(#[from] NetpbmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("category masks do not partition the image")]
    NotAPartition,
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("artifact mismatch: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    /// True for failures caused by non-finite numbers during a forward or
    /// backward pass.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. } | Error::Tensor(TensorError::NonFinite { .. })
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
