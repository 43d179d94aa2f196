//! The two federated roles wired onto the protocol: a client actor that
//! owns a shard and a SuperNet replica, and a controller that only ever
//! handles codes, ciphertexts and aggregates.

mod client;
mod controller;

pub use client::ClientActor;
pub use controller::{ClientSizes, Controller, EvalReport};

use thiserror::Error;

use crate::fedproto::FedError;
use crate::feo::FeoError;

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Feo(#[from] FeoError),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl FederationError {
    pub fn is_numeric(&self) -> bool {
        match self {
            FederationError::Numeric(_) => true,
            FederationError::Fed(e) => e.is_numeric(),
            FederationError::Feo(FeoError::NonFinite(_)) => true,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, FederationError>;
