//! Two-party encrypted inference.
//!
//! The server owns the converted model and evaluates it on ciphertexts. The
//! client owns the key, embeds its own tokens and answers relu requests by
//! decrypting, applying relu and re-encrypting.

mod codec;
mod session;
mod transport;

use thiserror::Error;

use crate::data::TaskKind;
use crate::he::{Backend, HeError, HeParams};
use crate::model::ModelError;
use crate::tensor::Tensor;

pub use codec::{decode_body, frame_decode, frame_encode, MAX_FRAME};
pub use session::{
    client_relu_service, run_session, ClientSession, QueryOutcome, ServerSession, ServerState, SessionOutcome,
};
pub use transport::{audit_transcript, channel_pair, ChannelTransport, Direction, Recorder, StreamTransport, Transcript, Transport};

pub const PROTOCOL_VERSION: u8 = 0x01;

/// Error codes carried by [`Message::Error`].
pub mod codes {
    pub const DEPTH_EXCEEDED: u16 = 1;
    pub const UNSUPPORTED_OP: u16 = 2;
    pub const MALFORMED: u16 = 3;
    pub const PROTOCOL: u16 = 4;
    pub const INTERNAL: u16 = 5;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    SessionInit { version: u8, params: HeParams, backend: Backend, model_id: String },
    EmbedAssets { vocab: Vec<String>, token_table: Tensor, position_table: Tensor, task: TaskKind, num_labels: usize },
    Query { blob: Vec<u8>, seq_len: u32, task: TaskKind },
    ReluRequest { id: u32, blob: Vec<u8> },
    ReluResponse { id: u32, blob: Vec<u8> },
    Result { blob: Vec<u8>, max_depth: u16, relu_round_trips: u32, budget: u16 },
    Error { code: u16, detail: String },
}

impl Message {
    pub fn name(&self) -> &'static str {
        match self {
            Message::SessionInit { .. } => "SESSION_INIT",
            Message::EmbedAssets { .. } => "EMBED_ASSETS",
            Message::Query { .. } => "QUERY",
            Message::ReluRequest { .. } => "RELU_REQUEST",
            Message::ReluResponse { .. } => "RELU_RESPONSE",
            Message::Result { .. } => "RESULT",
            Message::Error { .. } => "ERROR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    MalformedBlob(String),
    #[error("peer speaks protocol version {found}, expected {PROTOCOL_VERSION}")]
    ProtocolVersionMismatch { found: u8 },
    #[error("session aborted: {0}")]
    SessionAborted(String),
    #[error("empty query")]
    EmptyQuery,
    #[error("unexpected {got} while {state}")]
    Unexpected { state: &'static str, got: &'static str },
    #[error("remote error {code}: {detail}")]
    Remote { code: u16, detail: String },
    #[error(transparent)]
    He(#[from] HeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl ProtocolError {
    pub fn code(&self) -> u16 {
        match self {
            ProtocolError::He(HeError::DepthExceeded { .. }) => codes::DEPTH_EXCEEDED,
            ProtocolError::He(HeError::UnsupportedOp(_)) => codes::UNSUPPORTED_OP,
            ProtocolError::MalformedBlob(_) | ProtocolError::He(HeError::MalformedBlob(_)) => codes::MALFORMED,
            ProtocolError::ProtocolVersionMismatch { .. } | ProtocolError::Unexpected { .. } => codes::PROTOCOL,
            ProtocolError::Remote { code, .. } => *code,
            _ => codes::INTERNAL,
        }
    }
}

pub type ProtocolResult<T> = Result<T, ProtocolError>;
