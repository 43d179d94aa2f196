//! Controller/client protocol: secure aggregation, message framing,
//! transports and transcripts.

pub mod cipher;
mod hub;
pub mod transport;
pub mod wire;

pub use cipher::{
    aggregate, aggregate_grads, aggregate_losses, decrypt, encrypt, AggregationWeights, CipherVector, MaskKey, Scheme,
};
pub use hub::{Direction, Hub, TrafficStats, Transcript, TranscriptEntry};
pub use transport::{accept_clients, serve_client, ChannelLink, DirectLink, FrameHandler, Link, TcpLink, TransportKind};
pub use wire::{Body, ClientSetup, Envelope, Party, Phase};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("aggregation weights: {0}")]
    Weights(String),
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("non-finite value in plaintext")]
    NonFinite,
    #[error("value {value} overflows the 2^{bits} fixed-point range")]
    Overflow { value: f64, bits: u32 },
    #[error("mask scheme needs a client key")]
    MissingKey,
    #[error("bad frame: {0}")]
    Frame(String),
    #[error("tampered frame: {0}")]
    Tampered(String),
    #[error("layout hash {got} does not match {expected}")]
    LayoutMismatch { expected: String, got: String },
    #[error("round {got} does not follow {last}")]
    RoundRegression { last: u64, got: u64 },
    #[error("expected {expected}, got {got}")]
    Unexpected { expected: &'static str, got: &'static str },
    #[error("transport: {0}")]
    Transport(String),
    #[error("timed out waiting for a client")]
    Timeout,
    #[error("replay diverged: {0}")]
    Diverged(String),
    #[error("client {client} failed: {reason}")]
    Remote { client: usize, numeric: bool, reason: String },
}

impl FedError {
    /// True for failures caused by NaN/overflow rather than the protocol.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            FedError::NonFinite | FedError::Overflow { .. } | FedError::Remote { numeric: true, .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, FedError>;
