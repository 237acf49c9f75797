use std::io::{ErrorKind, Read, Write};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};

use super::{decode_body, frame_encode, Message, ProtocolError, ProtocolResult, MAX_FRAME};
use crate::he::CipherTensor;

/// An ordered, reliable message pipe to the peer.
pub trait Transport: Send {
    fn send(&mut self, msg: &Message) -> ProtocolResult<()>;
    fn recv(&mut self) -> ProtocolResult<Message>;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&mut self, msg: &Message) -> ProtocolResult<()> {
        (**self).send(msg)
    }
    fn recv(&mut self) -> ProtocolResult<Message> {
        (**self).recv()
    }
}

/// In-process transport carrying encoded frames over mpsc channels.
#[derive(Debug)]
pub struct ChannelTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

pub fn channel_pair() -> (ChannelTransport, ChannelTransport) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    (ChannelTransport { tx: a_tx, rx: a_rx }, ChannelTransport { tx: b_tx, rx: b_rx })
}

impl Transport for ChannelTransport {
    fn send(&mut self, msg: &Message) -> ProtocolResult<()> {
        self.tx.send(frame_encode(msg)).map_err(|_| ProtocolError::SessionAborted("peer hung up".into()))
    }

    fn recv(&mut self) -> ProtocolResult<Message> {
        let frame = self.rx.recv().map_err(|_| ProtocolError::SessionAborted("peer hung up".into()))?;
        super::frame_decode(&frame)
    }
}

/// Length-prefixed frames over any byte stream (TCP, Unix sockets).
#[derive(Debug)]
pub struct StreamTransport<S> {
    stream: S,
}

impl<S: Read + Write + Send> StreamTransport<S> {
    pub fn new(stream: S) -> Self {
        StreamTransport { stream }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

fn io_abort(e: std::io::Error) -> ProtocolError {
    ProtocolError::SessionAborted(e.to_string())
}

impl<S: Read + Write + Send> Transport for StreamTransport<S> {
    fn send(&mut self, msg: &Message) -> ProtocolResult<()> {
        self.stream.write_all(&frame_encode(msg)).map_err(io_abort)?;
        self.stream.flush().map_err(io_abort)
    }

    fn recv(&mut self) -> ProtocolResult<Message> {
        let mut len = [0u8; 4];
        self.stream.read_exact(&mut len).map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => ProtocolError::SessionAborted("peer closed the connection".into()),
            _ => io_abort(e),
        })?;
        let len = u32::from_le_bytes(len) as usize;
        if !(2..=MAX_FRAME).contains(&len) {
            return Err(ProtocolError::MalformedBlob(format!("frame length {len}")));
        }
        let mut body = vec![0u8; len];
        self.stream.read_exact(&mut body).map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => ProtocolError::MalformedBlob("truncated frame".into()),
            _ => io_abort(e),
        })?;
        decode_body(&body)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

pub type Transcript = Arc<Mutex<Vec<(Direction, Message)>>>;

/// Transport proxy that logs every message passing through it.
pub struct Recorder<T> {
    inner: T,
    log: Transcript,
}

impl<T: Transport> Recorder<T> {
    pub fn new(inner: T) -> Self {
        Recorder { inner, log: Transcript::default() }
    }

    pub fn transcript(&self) -> Transcript {
        Arc::clone(&self.log)
    }
}

impl<T: Transport> Transport for Recorder<T> {
    fn send(&mut self, msg: &Message) -> ProtocolResult<()> {
        self.log.lock().expect("transcript lock").push((Direction::Sent, msg.clone()));
        self.inner.send(msg)
    }

    fn recv(&mut self) -> ProtocolResult<Message> {
        let msg = self.inner.recv()?;
        self.log.lock().expect("transcript lock").push((Direction::Received, msg.clone()));
        Ok(msg)
    }
}

/// Checks that after setup every payload is a ciphertext blob or control
/// metadata. Returns the number of ciphertext blobs inspected.
pub fn audit_transcript(log: &[(Direction, Message)]) -> Result<usize, String> {
    let mut setup_done = false;
    let mut blobs = 0;
    for (i, (_, msg)) in log.iter().enumerate() {
        let blob = match msg {
            Message::SessionInit { .. } | Message::EmbedAssets { .. } if !setup_done => continue,
            Message::SessionInit { .. } | Message::EmbedAssets { .. } => {
                return Err(format!("message {i}: {} after setup", msg.name()));
            }
            Message::Query { blob, .. }
            | Message::ReluRequest { blob, .. }
            | Message::ReluResponse { blob, .. }
            | Message::Result { blob, .. } => blob,
            Message::Error { .. } => {
                setup_done = true;
                continue;
            }
        };
        setup_done = true;
        CipherTensor::from_bytes(blob).map_err(|e| format!("message {i} ({}): payload is not a ciphertext: {e}", msg.name()))?;
        blobs += 1;
    }
    Ok(blobs)
}
