use std::sync::Arc;

use super::{audit_transcript, channel_pair, Message, ProtocolError, ProtocolResult, Recorder, Transcript, Transport, PROTOCOL_VERSION};
use crate::data::{TaskKind, Vocab};
use crate::he::{he_forward, Backend, CipherTensor, DepthReport, HeContext, HeError, HeParams, HeResult, KeyId, KeyPair, ReluChannel};
use crate::model::{ModelError, TransformerModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerState {
    AwaitQuery,
    Forwarding,
    AwaitRelu,
    Done,
    Failed,
}

impl ServerState {
    fn name(self) -> &'static str {
        match self {
            ServerState::AwaitQuery => "awaiting query",
            ServerState::Forwarding => "forwarding",
            ServerState::AwaitRelu => "awaiting relu response",
            ServerState::Done => "done",
            ServerState::Failed => "failed",
        }
    }

    /// Whether `self -> next` is a legal server transition.
    pub fn can_go(self, next: ServerState) -> bool {
        use ServerState::*;
        matches!(
            (self, next),
            (AwaitQuery, Forwarding) | (Forwarding, AwaitRelu) | (AwaitRelu, Forwarding) | (Forwarding, Done) | (AwaitQuery | Forwarding | AwaitRelu, Failed)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionOutcome {
    pub report: DepthReport,
    pub relu_requests: u32,
}

/// Server half of a session. Holds the converted model but never a key.
pub struct ServerSession {
    model: Arc<TransformerModel>,
    ctx: HeContext,
    vocab: Vec<String>,
    task: TaskKind,
    model_id: String,
    history: Vec<ServerState>,
}

impl ServerSession {
    /// Fails with `NotHeReady` unless the model's forward is built from
    /// add, mul and relu only.
    pub fn new(
        model: Arc<TransformerModel>,
        params: HeParams,
        backend: Backend,
        vocab: Vec<String>,
        task: TaskKind,
        model_id: impl Into<String>,
    ) -> ProtocolResult<Self> {
        model.check_he_ready()?;
        if vocab.len() != model.config.vocab_size {
            return Err(ModelError::InvalidConfig(format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                model.config.vocab_size
            ))
            .into());
        }
        let ctx = HeContext::new(params, backend)?;
        Ok(ServerSession { model, ctx, vocab, task, model_id: model_id.into(), history: vec![ServerState::AwaitQuery] })
    }

    pub fn state(&self) -> ServerState {
        *self.history.last().expect("non-empty history")
    }

    pub fn history(&self) -> &[ServerState] {
        &self.history
    }

    fn go(&mut self, next: ServerState) {
        debug_assert!(self.state().can_go(next), "{:?} -> {next:?}", self.state());
        self.history.push(next);
    }

    /// Runs one query to completion. On failure the session ends in
    /// `Failed` and no result is sent.
    pub fn run(&mut self, transport: &mut dyn Transport) -> ProtocolResult<SessionOutcome> {
        let r = self.run_inner(transport);
        match &r {
            Ok(_) => self.go(ServerState::Done),
            Err(e) => {
                if self.state() != ServerState::Failed {
                    self.go(ServerState::Failed);
                }
                if !matches!(e, ProtocolError::SessionAborted(_)) {
                    let _ = transport.send(&Message::Error { code: e.code(), detail: e.to_string() });
                }
            }
        }
        r
    }

    fn run_inner(&mut self, transport: &mut dyn Transport) -> ProtocolResult<SessionOutcome> {
        transport.send(&Message::SessionInit {
            version: PROTOCOL_VERSION,
            params: self.ctx.params.clone(),
            backend: self.ctx.backend,
            model_id: self.model_id.clone(),
        })?;
        transport.send(&Message::EmbedAssets {
            vocab: self.vocab.clone(),
            token_table: self.model.param("emb.tok")?.clone(),
            position_table: self.model.param("emb.pos")?.clone(),
            task: self.task,
            num_labels: self.model.config.num_labels,
        })?;
        let (blob, seq_len) = match transport.recv()? {
            Message::Query { blob, seq_len, .. } => (blob, seq_len as usize),
            Message::Error { code, detail } => return Err(ProtocolError::Remote { code, detail }),
            other => return Err(ProtocolError::Unexpected { state: self.state().name(), got: other.name() }),
        };
        let input = CipherTensor::from_bytes(&blob)?;
        let hidden = self.model.config.hidden_size;
        if input.shape() != [seq_len, hidden] || input.backend() != self.ctx.backend || input.depth() != 0 {
            return Err(ProtocolError::MalformedBlob(format!(
                "query must be a fresh {} ciphertext of shape [{seq_len}, {hidden}], got {:?}",
                self.ctx.backend,
                input.shape()
            )));
        }
        if seq_len == 0 {
            return Err(ProtocolError::EmptyQuery);
        }
        self.go(ServerState::Forwarding);
        let key_id = input.key_id();
        let model = Arc::clone(&self.model);
        let ctx = self.ctx.clone();
        let mut channel = RemoteRelu { transport, key_id, next_id: 0, history: &mut self.history, failure: None };
        let result = he_forward(&model, input, seq_len, &ctx, &mut channel);
        let requests = channel.next_id;
        if let Some(f) = channel.failure.take() {
            return Err(f);
        }
        let (out, report) = result?;
        transport.send(&Message::Result {
            blob: out.to_bytes(),
            max_depth: report.max_depth,
            relu_round_trips: report.relu_round_trips,
            budget: report.budget,
        })?;
        Ok(SessionOutcome { report, relu_requests: requests })
    }
}

struct RemoteRelu<'a> {
    transport: &'a mut dyn Transport,
    key_id: KeyId,
    next_id: u32,
    history: &'a mut Vec<ServerState>,
    failure: Option<ProtocolError>,
}

impl RemoteRelu<'_> {
    fn exchange(&mut self, ct: &CipherTensor) -> ProtocolResult<CipherTensor> {
        let id = self.next_id;
        self.next_id += 1;
        self.history.push(ServerState::AwaitRelu);
        self.transport.send(&Message::ReluRequest { id, blob: ct.to_bytes() })?;
        let reply = match self.transport.recv()? {
            Message::ReluResponse { id: got, blob } if got == id => CipherTensor::from_bytes(&blob)?,
            Message::ReluResponse { id: got, .. } => {
                return Err(ProtocolError::MalformedBlob(format!("relu response id {got}, expected {id}")))
            }
            Message::Error { code, detail } => return Err(ProtocolError::Remote { code, detail }),
            other => return Err(ProtocolError::Unexpected { state: ServerState::AwaitRelu.name(), got: other.name() }),
        };
        if reply.key_id() != self.key_id || reply.shape() != ct.shape() || reply.depth() != 0 {
            return Err(ProtocolError::MalformedBlob("relu response does not match its request".into()));
        }
        self.history.push(ServerState::Forwarding);
        Ok(reply)
    }
}

impl ReluChannel for RemoteRelu<'_> {
    fn relu(&mut self, ct: CipherTensor) -> HeResult<CipherTensor> {
        if self.failure.is_some() {
            return Err(HeError::ChannelClosed);
        }
        self.exchange(&ct).map_err(|e| {
            self.failure = Some(e);
            HeError::ChannelClosed
        })
    }
}

/// Decrypts a relu request, applies relu and re-encrypts at depth zero.
pub fn client_relu_service(ctx: &HeContext, key: &KeyPair, req: &Message) -> ProtocolResult<Message> {
    let Message::ReluRequest { id, blob } = req else {
        return Err(ProtocolError::Unexpected { state: "serving relu", got: req.name() });
    };
    let ct = CipherTensor::from_bytes(blob)?;
    let x = ctx.decrypt(&ct, key)?;
    let out = ctx.encrypt(&x.relu().map_err(ModelError::from)?, key)?;
    Ok(Message::ReluResponse { id: *id, blob: out.to_bytes() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub token_ids: Vec<usize>,
    pub logits: Tensor,
    /// Depth accounting as reported by the server.
    pub report: DepthReport,
    pub relu_requests: u32,
    /// Deepest ciphertext the client saw in a relu request or the result.
    pub max_observed_depth: u16,
}

/// Client half of a session: key, embedding tables and tokenizer.
pub struct ClientSession<T: Transport> {
    transport: T,
    key: KeyPair,
    ctx: HeContext,
    vocab: Vocab,
    token_table: Tensor,
    position_table: Tensor,
    task: TaskKind,
    num_labels: usize,
    model_id: String,
}

impl<T: Transport> ClientSession<T> {
    /// Receives the session parameters and embedding assets.
    pub fn connect(mut transport: T, key: KeyPair) -> ProtocolResult<Self> {
        let (params, backend, model_id) = match transport.recv()? {
            Message::SessionInit { version, params, backend, model_id } => {
                if version != PROTOCOL_VERSION {
                    return Err(ProtocolError::ProtocolVersionMismatch { found: version });
                }
                (params, backend, model_id)
            }
            Message::Error { code, detail } => return Err(ProtocolError::Remote { code, detail }),
            other => return Err(ProtocolError::Unexpected { state: "connecting", got: other.name() }),
        };
        let ctx = HeContext::new(params, backend)?;
        let (vocab, token_table, position_table, task, num_labels) = match transport.recv()? {
            Message::EmbedAssets { vocab, token_table, position_table, task, num_labels } => {
                (vocab, token_table, position_table, task, num_labels)
            }
            Message::Error { code, detail } => return Err(ProtocolError::Remote { code, detail }),
            other => return Err(ProtocolError::Unexpected { state: "connecting", got: other.name() }),
        };
        if token_table.rank() != 2 || position_table.rank() != 2 || token_table.shape()[1] != position_table.shape()[1] {
            return Err(ProtocolError::MalformedBlob("embedding tables disagree".into()));
        }
        let vocab = Vocab::from_tokens(vocab.into_iter().skip(crate::data::SPECIALS));
        if vocab.len() != token_table.shape()[0] {
            return Err(ProtocolError::MalformedBlob("vocabulary does not match token table".into()));
        }
        Ok(ClientSession { transport, key, ctx, vocab, token_table, position_table, task, num_labels, model_id })
    }

    pub fn context(&self) -> &HeContext {
        &self.ctx
    }

    pub fn key(&self) -> &KeyPair {
        &self.key
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    /// Tokenizes `text` and looks up token plus position embeddings locally.
    /// Unknown words map to the reserved unknown id.
    pub fn embed(&self, text: &str) -> ProtocolResult<(Vec<usize>, Tensor)> {
        let ids = self.vocab.encode(text).map_err(|_| ProtocolError::EmptyQuery)?;
        let max = self.position_table.shape()[0];
        if ids.len() > max {
            return Err(ModelError::SeqTooLong { len: ids.len(), max }.into());
        }
        let positions: Vec<usize> = (0..ids.len()).collect();
        let t = self.token_table.gather_rows(&ids).map_err(ModelError::from)?;
        let p = self.position_table.gather_rows(&positions).map_err(ModelError::from)?;
        Ok((ids, t.add(&p).map_err(ModelError::from)?))
    }

    /// Embeds, encrypts and sends `text`; returns the token ids.
    pub fn send_query(&mut self, text: &str) -> ProtocolResult<Vec<usize>> {
        let (ids, x) = self.embed(text)?;
        let ct = self.ctx.encrypt(&x, &self.key)?;
        self.transport.send(&Message::Query { blob: ct.to_bytes(), seq_len: ids.len() as u32, task: self.task })?;
        Ok(ids)
    }

    /// Answers relu requests until the result arrives, then decrypts it.
    pub fn finish(&mut self, token_ids: Vec<usize>) -> ProtocolResult<QueryOutcome> {
        let mut relu_requests = 0;
        let mut max_observed_depth = 0;
        loop {
            match self.transport.recv()? {
                req @ Message::ReluRequest { .. } => {
                    if let Message::ReluRequest { blob, .. } = &req {
                        max_observed_depth = max_observed_depth.max(CipherTensor::from_bytes(blob)?.depth());
                    }
                    let resp = client_relu_service(&self.ctx, &self.key, &req)?;
                    self.transport.send(&resp)?;
                    relu_requests += 1;
                }
                Message::Result { blob, max_depth, relu_round_trips, budget } => {
                    let ct = CipherTensor::from_bytes(&blob)?;
                    max_observed_depth = max_observed_depth.max(ct.depth());
                    let logits = self.ctx.decrypt(&ct, &self.key)?;
                    return Ok(QueryOutcome {
                        token_ids,
                        logits,
                        report: DepthReport { max_depth, relu_round_trips, budget },
                        relu_requests,
                        max_observed_depth,
                    });
                }
                Message::Error { code, detail } => return Err(ProtocolError::Remote { code, detail }),
                other => return Err(ProtocolError::Unexpected { state: "awaiting result", got: other.name() }),
            }
        }
    }

    pub fn query(&mut self, text: &str) -> ProtocolResult<QueryOutcome> {
        let ids = self.send_query(text)?;
        self.finish(ids)
    }
}

/// Runs a complete session over the in-process transport with the server
/// on its own thread. The server-side transcript is audited for plaintext
/// leakage before returning.
pub fn run_session(
    server: &mut ServerSession,
    key: KeyPair,
    text: &str,
) -> ProtocolResult<(QueryOutcome, SessionOutcome, Transcript)> {
    let (server_end, client_end) = channel_pair();
    let mut recorded = Recorder::new(server_end);
    let transcript = recorded.transcript();
    let (client, served) = std::thread::scope(|s| {
        let handle = s.spawn(move || {
            let r = server.run(&mut recorded);
            drop(recorded);
            r
        });
        let client = ClientSession::connect(client_end, key).and_then(|mut c| c.query(text));
        let served = handle.join().unwrap_or_else(|_| Err(ProtocolError::SessionAborted("server thread panicked".into())));
        (client, served)
    });
    let served = served?;
    let client = client?;
    let log = transcript.lock().expect("transcript lock").clone();
    audit_transcript(&log).map_err(|e| ProtocolError::SessionAborted(format!("leakage audit failed: {e}")))?;
    Ok((client, served, transcript))
}
