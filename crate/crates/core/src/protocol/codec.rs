use super::{Message, ProtocolError, ProtocolResult, PROTOCOL_VERSION};
use crate::data::TaskKind;
use crate::he::{Backend, HeParams};
use crate::tensor::Tensor;

const TAG_SESSION_INIT: u8 = 1;
const TAG_EMBED_ASSETS: u8 = 2;
const TAG_QUERY: u8 = 3;
const TAG_RELU_REQUEST: u8 = 4;
const TAG_RELU_RESPONSE: u8 = 5;
const TAG_RESULT: u8 = 6;
const TAG_ERROR: u8 = 7;

/// Upper bound on a single frame body.
pub const MAX_FRAME: usize = 1 << 30;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u8(t.rank() as u8);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn malformed(msg: impl Into<String>) -> ProtocolError {
    ProtocolError::MalformedBlob(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> ProtocolResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| malformed("truncated payload"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> ProtocolResult<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> ProtocolResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> ProtocolResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn bytes(&mut self) -> ProtocolResult<Vec<u8>> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    fn str(&mut self) -> ProtocolResult<String> {
        String::from_utf8(self.bytes()?).map_err(|_| malformed("invalid utf-8"))
    }
    fn tensor(&mut self) -> ProtocolResult<Tensor> {
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| malformed("tensor too large"))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| malformed("tensor too large"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::new(shape, data).map_err(|e| malformed(e.to_string()))
    }
    fn finish(&self) -> ProtocolResult<()> {
        if self.pos != self.buf.len() {
            return Err(malformed("trailing bytes"));
        }
        Ok(())
    }
}

/// Encodes `msg` as `len u32 LE | version | tag | payload`, where `len`
/// counts the version, tag and payload bytes.
pub fn frame_encode(msg: &Message) -> Vec<u8> {
    let mut w = Writer::default();
    let tag = match msg {
        Message::SessionInit { version, params, backend, model_id } => {
            w.u8(*version);
            w.u32(params.poly_modulus_degree as u32);
            w.bytes(&params.coeff_modulus_bits);
            w.u8(params.scale_bits);
            w.u8(params.packing as u8);
            w.u8(backend.tag());
            w.str(model_id);
            TAG_SESSION_INIT
        }
        Message::EmbedAssets { vocab, token_table, position_table, task, num_labels } => {
            w.u32(vocab.len() as u32);
            for t in vocab {
                w.str(t);
            }
            w.tensor(token_table);
            w.tensor(position_table);
            w.u8(task.code());
            w.u32(*num_labels as u32);
            TAG_EMBED_ASSETS
        }
        Message::Query { blob, seq_len, task } => {
            w.bytes(blob);
            w.u32(*seq_len);
            w.u8(task.code());
            TAG_QUERY
        }
        Message::ReluRequest { id, blob } => {
            w.u32(*id);
            w.bytes(blob);
            TAG_RELU_REQUEST
        }
        Message::ReluResponse { id, blob } => {
            w.u32(*id);
            w.bytes(blob);
            TAG_RELU_RESPONSE
        }
        Message::Result { blob, max_depth, relu_round_trips, budget } => {
            w.bytes(blob);
            w.u16(*max_depth);
            w.u32(*relu_round_trips);
            w.u16(*budget);
            TAG_RESULT
        }
        Message::Error { code, detail } => {
            w.u16(*code);
            w.str(detail);
            TAG_ERROR
        }
    };
    let body = w.0;
    let mut out = Vec::with_capacity(body.len() + 6);
    out.extend_from_slice(&((body.len() + 2) as u32).to_le_bytes());
    out.push(PROTOCOL_VERSION);
    out.push(tag);
    out.extend_from_slice(&body);
    out
}

/// Decodes one complete frame.
pub fn frame_decode(bytes: &[u8]) -> ProtocolResult<Message> {
    if bytes.len() < 6 {
        return Err(malformed("frame shorter than header"));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if len < 2 || len + 4 != bytes.len() {
        return Err(malformed(format!("frame length {len} does not match {} bytes", bytes.len() - 4)));
    }
    decode_body(&bytes[4..])
}

/// Decodes `version | tag | payload`.
pub fn decode_body(body: &[u8]) -> ProtocolResult<Message> {
    if body.len() < 2 {
        return Err(malformed("frame shorter than header"));
    }
    if body[0] != PROTOCOL_VERSION {
        return Err(ProtocolError::ProtocolVersionMismatch { found: body[0] });
    }
    let mut r = Reader { buf: &body[2..], pos: 0 };
    let msg = match body[1] {
        TAG_SESSION_INIT => {
            let version = r.u8()?;
            let degree = r.u32()? as usize;
            let bits = r.bytes()?;
            let scale_bits = r.u8()?;
            let packing = r.u8()? != 0;
            let backend = Backend::from_tag(r.u8()?).ok_or_else(|| malformed("unknown backend"))?;
            let model_id = r.str()?;
            let params = HeParams { poly_modulus_degree: degree, coeff_modulus_bits: bits, scale_bits, packing };
            Message::SessionInit { version, params, backend, model_id }
        }
        TAG_EMBED_ASSETS => {
            let n = r.u32()? as usize;
            let mut vocab = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                vocab.push(r.str()?);
            }
            let token_table = r.tensor()?;
            let position_table = r.tensor()?;
            let task = TaskKind::from_code(r.u8()?).ok_or_else(|| malformed("unknown task"))?;
            let num_labels = r.u32()? as usize;
            Message::EmbedAssets { vocab, token_table, position_table, task, num_labels }
        }
        TAG_QUERY => {
            let blob = r.bytes()?;
            let seq_len = r.u32()?;
            let task = TaskKind::from_code(r.u8()?).ok_or_else(|| malformed("unknown task"))?;
            Message::Query { blob, seq_len, task }
        }
        TAG_RELU_REQUEST => Message::ReluRequest { id: r.u32()?, blob: r.bytes()? },
        TAG_RELU_RESPONSE => Message::ReluResponse { id: r.u32()?, blob: r.bytes()? },
        TAG_RESULT => Message::Result { blob: r.bytes()?, max_depth: r.u16()?, relu_round_trips: r.u32()?, budget: r.u16()? },
        TAG_ERROR => Message::Error { code: r.u16()?, detail: r.str()? },
        t => return Err(malformed(format!("unknown message tag {t}"))),
    };
    r.finish()?;
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn samples() -> Vec<Message> {
        vec![
            Message::SessionInit { version: 1, params: HeParams::default(), backend: Backend::FixedPoint, model_id: "m".into() },
            Message::EmbedAssets {
                vocab: vec!["[PAD]".into(), "héllo".into()],
                token_table: Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
                position_table: Tensor::matrix(1, 3, vec![1.0, 1.0, 1.0]).unwrap(),
                task: TaskKind::Tag,
                num_labels: 4,
            },
            Message::Query { blob: vec![1, 2, 3], seq_len: 5, task: TaskKind::Classify },
            Message::ReluRequest { id: 7, blob: vec![9; 40] },
            Message::ReluResponse { id: 7, blob: vec![] },
            Message::Result { blob: vec![0, 255], max_depth: 9, relu_round_trips: 12, budget: 17 },
            Message::Error { code: 3, detail: "depth".into() },
        ]
    }

    #[test]
    fn every_variant_round_trips() {
        for m in samples() {
            assert_eq!(frame_decode(&frame_encode(&m)).unwrap(), m);
        }
    }

    #[test]
    fn truncation_and_bad_headers() {
        for m in samples() {
            let f = frame_encode(&m);
            for cut in 0..f.len() {
                assert!(matches!(frame_decode(&f[..cut]), Err(ProtocolError::MalformedBlob(_))), "{m:?} cut {cut}");
            }
        }
        let mut f = frame_encode(&samples()[3]);
        f[4] = 0x02;
        assert!(matches!(frame_decode(&f), Err(ProtocolError::ProtocolVersionMismatch { found: 2 })));
        let mut f = frame_encode(&samples()[3]);
        f[5] = 0x42;
        assert!(matches!(frame_decode(&f), Err(ProtocolError::MalformedBlob(_))));
    }

    proptest! {
        #[test]
        fn random_payloads_round_trip(id in any::<u32>(), blob in proptest::collection::vec(any::<u8>(), 0..200),
                                      depth in any::<u16>(), trips in any::<u32>(), detail in ".{0,40}") {
            for m in [
                Message::ReluRequest { id, blob: blob.clone() },
                Message::ReluResponse { id, blob: blob.clone() },
                Message::Result { blob: blob.clone(), max_depth: depth, relu_round_trips: trips, budget: depth },
                Message::Error { code: depth, detail: detail.clone() },
            ] {
                prop_assert_eq!(frame_decode(&frame_encode(&m)).unwrap(), m);
            }
        }

        #[test]
        fn garbage_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = frame_decode(&bytes);
        }
    }
}
