//! Encoding weight updates as small synthetic datasets, and a federated
//! simulator that exchanges them instead of raw updates.

pub mod codec;
pub mod config;
pub mod data;
pub mod fed;
pub mod leakage;
pub mod ledger;
pub mod models;
pub mod ndgrad;
pub mod optim;
pub mod runner;
pub mod tensor;

use std::path::PathBuf;

use thiserror::Error;

/// Any failure, tagged with the module it came from.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(#[from] config::ConfigError),
    #[error("data: {0}")]
    Data(#[from] data::DataError),
    #[error("models: {0}")]
    Model(#[from] models::ModelError),
    #[error("codec: {0}")]
    Codec(#[from] codec::CodecError),
    #[error("fed: {0}")]
    Fed(#[from] fed::FedError),
    #[error("leakage: {0}")]
    Leakage(#[from] leakage::LeakageError),
    #[error("ledger: {0}")]
    Ledger(#[from] ledger::LedgerError),
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit status: 2 for bad input, 3 for a broken invariant, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Data(_) => 2,
            Error::Fed(fed::FedError::SyncViolation { .. }) => 3,
            _ => 1,
        }
    }
}
