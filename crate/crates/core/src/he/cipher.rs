use std::fmt;
use std::sync::Arc;

use super::{noise, HeContext, HeError, HeResult, KeyId, KeyPair};
use crate::tensor::{layout, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backend {
    Shadow,
    FixedPoint,
}

impl Backend {
    pub fn tag(self) -> u8 {
        match self {
            Backend::Shadow => 0,
            Backend::FixedPoint => 1,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Backend::Shadow),
            1 => Some(Backend::FixedPoint),
            _ => None,
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Shadow => "shadow",
            Backend::FixedPoint => "fixedpoint",
        })
    }
}

impl std::str::FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "shadow" => Ok(Backend::Shadow),
            "fixedpoint" | "fixed-point" => Ok(Backend::FixedPoint),
            other => Err(format!("unknown backend `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    Shadow(Arc<Vec<f64>>),
    Fixed(Arc<Vec<i64>>),
}

impl Payload {
    fn len(&self) -> usize {
        match self {
            Payload::Shadow(v) => v.len(),
            Payload::Fixed(v) => v.len(),
        }
    }
}

/// An encrypted tensor. Values are laid out row-major exactly like the
/// plaintext [`Tensor`] they encrypt.
#[derive(Debug, Clone, PartialEq)]
pub struct CipherTensor {
    backend: Backend,
    key_id: KeyId,
    level: u16,
    depth: u16,
    scale_bits: u8,
    shape: Vec<usize>,
    pack_len: usize,
    payload: Payload,
}

impl CipherTensor {
    pub fn backend(&self) -> Backend {
        self.backend
    }
    pub fn key_id(&self) -> KeyId {
        self.key_id
    }
    /// Rescales consumed so far.
    pub fn level(&self) -> u16 {
        self.level
    }
    pub fn depth(&self) -> u16 {
        self.depth
    }
    pub fn scale_bits(&self) -> u8 {
        self.scale_bits
    }
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn len(&self) -> usize {
        self.payload.len()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn pack_count(&self) -> usize {
        if self.pack_len == 0 {
            0
        } else {
            self.len().div_ceil(self.pack_len)
        }
    }

    fn derive(&self, shape: Vec<usize>, payload: Payload) -> CipherTensor {
        CipherTensor { shape, payload, ..self.clone_meta() }
    }

    fn clone_meta(&self) -> CipherTensor {
        CipherTensor {
            backend: self.backend,
            key_id: self.key_id,
            level: self.level,
            depth: self.depth,
            scale_bits: self.scale_bits,
            shape: Vec::new(),
            pack_len: self.pack_len,
            payload: Payload::Shadow(Arc::new(Vec::new())),
        }
    }

    const MAGIC: &'static [u8; 4] = b"HEXC";
    const VERSION: u8 = 1;

    /// Byte-exact little-endian serialization.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + self.len() * 8);
        out.extend_from_slice(Self::MAGIC);
        out.push(Self::VERSION);
        out.push(self.backend.tag());
        out.extend_from_slice(&self.key_id.0);
        out.extend_from_slice(&self.level.to_le_bytes());
        out.extend_from_slice(&self.depth.to_le_bytes());
        out.push(self.scale_bits);
        out.extend_from_slice(&(self.pack_count() as u32).to_le_bytes());
        out.push(self.shape.len() as u8);
        for d in &self.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.pack_len as u32).to_le_bytes());
        let words: Vec<[u8; 8]> = match &self.payload {
            Payload::Shadow(v) => v.iter().map(|x| x.to_le_bytes()).collect(),
            Payload::Fixed(v) => v.iter().map(|x| x.to_le_bytes()).collect(),
        };
        if self.pack_len > 0 {
            for pack in words.chunks(self.pack_len) {
                out.extend_from_slice(&(pack.len() as u32).to_le_bytes());
                for w in pack {
                    out.extend_from_slice(w);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> HeResult<CipherTensor> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != Self::MAGIC {
            return Err(HeError::MalformedBlob("bad magic".into()));
        }
        let version = r.u8()?;
        if version != Self::VERSION {
            return Err(HeError::MalformedBlob(format!("unsupported blob version {version}")));
        }
        let backend = Backend::from_tag(r.u8()?).ok_or_else(|| HeError::MalformedBlob("unknown backend".into()))?;
        let mut key = [0u8; 16];
        key.copy_from_slice(r.take(16)?);
        let level = r.u16()?;
        let depth = r.u16()?;
        let scale_bits = r.u8()?;
        let packs = r.u32()? as usize;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let pack_len = r.u32()? as usize;
        let total = shape.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d));
        let total = total.ok_or_else(|| HeError::MalformedBlob("shape overflows".into()))?;
        let expected_packs = if pack_len == 0 { 0 } else { total.div_ceil(pack_len) };
        if packs != expected_packs || (pack_len == 0 && total != 0) {
            return Err(HeError::MalformedBlob(format!("{packs} packs cannot hold shape {shape:?}")));
        }
        if total > r.remaining() / 8 {
            return Err(HeError::MalformedBlob("truncated payload".into()));
        }
        let mut words = Vec::with_capacity(total);
        for p in 0..packs {
            let n = r.u32()? as usize;
            let want = pack_len.min(total - p * pack_len);
            if n != want {
                return Err(HeError::MalformedBlob(format!("pack {p} holds {n} slots, expected {want}")));
            }
            for _ in 0..n {
                let mut w = [0u8; 8];
                w.copy_from_slice(r.take(8)?);
                words.push(w);
            }
        }
        if r.remaining() != 0 {
            return Err(HeError::MalformedBlob("trailing bytes".into()));
        }
        let payload = match backend {
            Backend::Shadow => Payload::Shadow(Arc::new(words.iter().map(|w| f64::from_le_bytes(*w)).collect())),
            Backend::FixedPoint => Payload::Fixed(Arc::new(words.iter().map(|w| i64::from_le_bytes(*w)).collect())),
        };
        Ok(CipherTensor { backend, key_id: KeyId(key), level, depth, scale_bits, shape, pack_len, payload })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> HeResult<&'a [u8]> {
        if self.remaining() < n {
            return Err(HeError::MalformedBlob("truncated blob".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    fn u8(&mut self) -> HeResult<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> HeResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> HeResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Largest encoded magnitude; leaves headroom for sums before i64 overflow.
const FIXED_LIMIT: f64 = (1u64 << 62) as f64;

fn rescale(p: i128, bits: u8) -> Option<i64> {
    let half = 1i128 << (bits - 1);
    i64::try_from((p + half) >> bits).ok()
}

fn all_some(v: Vec<Option<i64>>, op: &'static str) -> HeResult<Vec<i64>> {
    v.into_iter().collect::<Option<Vec<_>>>().ok_or(HeError::Overflow(op))
}

fn finite(v: Vec<f64>, op: &'static str) -> HeResult<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(HeError::Overflow(op))
    }
}

impl HeContext {
    fn scale_factor(&self) -> f64 {
        (1u64 << self.params.scale_bits) as f64
    }

    fn encode(&self, values: &[f64], op: &'static str) -> HeResult<Vec<i64>> {
        let s = self.scale_factor();
        values
            .iter()
            .map(|&x| {
                let v = (x * s).round();
                if v.is_finite() && v.abs() < FIXED_LIMIT {
                    Ok(v as i64)
                } else {
                    Err(HeError::Overflow(op))
                }
            })
            .collect()
    }

    fn pack_len_for(&self, shape: &[usize]) -> HeResult<usize> {
        let slots = self.params.slot_count();
        if self.params.packing {
            return Ok(slots);
        }
        if let Some(&len) = shape.iter().find(|&&d| d > slots) {
            return Err(HeError::TooManySlots { len, slots });
        }
        Ok(shape.last().copied().unwrap_or(1))
    }

    pub fn encrypt(&self, x: &Tensor, key: &KeyPair) -> HeResult<CipherTensor> {
        let pack_len = self.pack_len_for(x.shape())?;
        let payload = match self.backend {
            Backend::Shadow => Payload::Shadow(Arc::new(x.data().to_vec())),
            Backend::FixedPoint => {
                let mut rng = key.noise_stream();
                let mut enc = self.encode(x.data(), "encrypt")?;
                for v in &mut enc {
                    *v += noise(&mut rng);
                }
                Payload::Fixed(Arc::new(enc))
            }
        };
        Ok(CipherTensor {
            backend: self.backend,
            key_id: key.id(),
            level: 0,
            depth: 0,
            scale_bits: self.params.scale_bits,
            shape: x.shape().to_vec(),
            pack_len,
            payload,
        })
    }

    pub fn decrypt(&self, ct: &CipherTensor, key: &KeyPair) -> HeResult<Tensor> {
        if ct.key_id != key.id() {
            return Err(HeError::KeyMismatch { expected: key.id(), found: ct.key_id });
        }
        let data = match &ct.payload {
            Payload::Shadow(v) => v.as_ref().clone(),
            Payload::Fixed(v) => {
                let s = (1u64 << ct.scale_bits) as f64;
                v.iter().map(|&x| x as f64 / s).collect()
            }
        };
        Ok(Tensor::new(ct.shape.clone(), data)?)
    }

    fn check_compat(&self, a: &CipherTensor, b: &CipherTensor) -> HeResult<()> {
        if a.key_id != b.key_id {
            return Err(HeError::KeyMismatch { expected: a.key_id, found: b.key_id });
        }
        if a.backend != b.backend {
            return Err(HeError::BackendMismatch { lhs: a.backend, rhs: b.backend });
        }
        if a.scale_bits != b.scale_bits {
            return Err(HeError::ScaleMismatch { lhs: a.scale_bits, rhs: b.scale_bits });
        }
        Ok(())
    }

    fn check_own(&self, a: &CipherTensor) -> HeResult<()> {
        if a.backend != self.backend {
            return Err(HeError::BackendMismatch { lhs: self.backend, rhs: a.backend });
        }
        Ok(())
    }

    /// Drops `a` down the modulus chain to `level` without changing values.
    pub fn mod_switch(&self, a: &CipherTensor, level: u16) -> HeResult<CipherTensor> {
        if level < a.level || level > self.level_budget() {
            return Err(HeError::LevelMismatch { lhs: a.level, rhs: level });
        }
        let mut out = a.clone();
        out.level = level;
        Ok(out)
    }

    /// Brings two ciphertexts to their common (deeper) level.
    pub fn align(&self, a: &CipherTensor, b: &CipherTensor) -> HeResult<(CipherTensor, CipherTensor)> {
        let l = a.level.max(b.level);
        Ok((self.mod_switch(a, l)?, self.mod_switch(b, l)?))
    }

    fn zip_cc(
        &self,
        op: &'static str,
        a: &CipherTensor,
        b: &CipherTensor,
        fs: impl Fn(f64, f64) -> f64,
        fi: impl Fn(i64, i64) -> Option<i64>,
    ) -> HeResult<(Vec<usize>, Payload)> {
        match (&a.payload, &b.payload) {
            (Payload::Shadow(x), Payload::Shadow(y)) => {
                let (shape, v) = layout::broadcast_zip(op, x, &a.shape, y, &b.shape, fs)?;
                Ok((shape, Payload::Shadow(Arc::new(finite(v, op)?))))
            }
            (Payload::Fixed(x), Payload::Fixed(y)) => {
                let (shape, v) = layout::broadcast_zip(op, x, &a.shape, y, &b.shape, fi)?;
                Ok((shape, Payload::Fixed(Arc::new(all_some(v, op)?))))
            }
            _ => Err(HeError::BackendMismatch { lhs: a.backend, rhs: b.backend }),
        }
    }

    fn zip_cp(
        &self,
        op: &'static str,
        a: &CipherTensor,
        p: &Tensor,
        fs: impl Fn(f64, f64) -> f64,
        fi: impl Fn(i64, i64) -> Option<i64>,
    ) -> HeResult<(Vec<usize>, Payload)> {
        match &a.payload {
            Payload::Shadow(x) => {
                let (shape, v) = layout::broadcast_zip(op, x, &a.shape, p.data(), p.shape(), fs)?;
                Ok((shape, Payload::Shadow(Arc::new(finite(v, op)?))))
            }
            Payload::Fixed(x) => {
                let enc = self.encode(p.data(), op)?;
                let (shape, v) = layout::broadcast_zip(op, x, &a.shape, &enc, p.shape(), fi)?;
                Ok((shape, Payload::Fixed(Arc::new(all_some(v, op)?))))
            }
        }
    }

    fn same_level(a: &CipherTensor, b: &CipherTensor) -> HeResult<()> {
        if a.level != b.level {
            return Err(HeError::LevelMismatch { lhs: a.level, rhs: b.level });
        }
        Ok(())
    }

    pub fn add(&self, a: &CipherTensor, b: &CipherTensor) -> HeResult<CipherTensor> {
        self.check_compat(a, b)?;
        Self::same_level(a, b)?;
        let (shape, payload) = self.zip_cc("ct_add", a, b, |x, y| x + y, i64::checked_add)?;
        let mut out = a.derive(shape, payload);
        out.depth = a.depth.max(b.depth);
        Ok(out)
    }

    pub fn sub(&self, a: &CipherTensor, b: &CipherTensor) -> HeResult<CipherTensor> {
        self.check_compat(a, b)?;
        Self::same_level(a, b)?;
        let (shape, payload) = self.zip_cc("ct_sub", a, b, |x, y| x - y, i64::checked_sub)?;
        let mut out = a.derive(shape, payload);
        out.depth = a.depth.max(b.depth);
        Ok(out)
    }

    pub fn add_plain(&self, a: &CipherTensor, p: &Tensor) -> HeResult<CipherTensor> {
        self.check_own(a)?;
        let (shape, payload) = self.zip_cp("ct_add_plain", a, p, |x, y| x + y, i64::checked_add)?;
        Ok(a.derive(shape, payload))
    }

    pub fn sub_plain(&self, a: &CipherTensor, p: &Tensor) -> HeResult<CipherTensor> {
        self.check_own(a)?;
        let (shape, payload) = self.zip_cp("ct_sub_plain", a, p, |x, y| x - y, i64::checked_sub)?;
        Ok(a.derive(shape, payload))
    }

    /// `p - a`.
    pub fn plain_sub(&self, p: &Tensor, a: &CipherTensor) -> HeResult<CipherTensor> {
        self.check_own(a)?;
        let (shape, payload) = self.zip_cp("ct_plain_sub", a, p, |x, y| y - x, |x, y| y.checked_sub(x))?;
        Ok(a.derive(shape, payload))
    }

    fn next_level(&self, level: u16, depth: u16, site: &str) -> HeResult<(u16, u16)> {
        let budget = self.level_budget();
        if level >= budget {
            return Err(HeError::DepthExceeded { site: site.to_string(), depth: depth + 1, budget });
        }
        Ok((level + 1, depth + 1))
    }

    pub fn mul(&self, a: &CipherTensor, b: &CipherTensor) -> HeResult<CipherTensor> {
        self.check_compat(a, b)?;
        Self::same_level(a, b)?;
        let (level, depth) = self.next_level(a.level, a.depth.max(b.depth), "ct_mul")?;
        let bits = a.scale_bits;
        let (shape, payload) =
            self.zip_cc("ct_mul", a, b, |x, y| x * y, |x, y| rescale(x as i128 * y as i128, bits))?;
        let mut out = a.derive(shape, payload);
        out.level = level;
        out.depth = depth;
        Ok(out)
    }

    pub fn mul_plain(&self, a: &CipherTensor, p: &Tensor) -> HeResult<CipherTensor> {
        self.check_own(a)?;
        let (level, depth) = self.next_level(a.level, a.depth, "ct_mul_plain")?;
        let bits = a.scale_bits;
        let (shape, payload) =
            self.zip_cp("ct_mul_plain", a, p, |x, y| x * y, |x, y| rescale(x as i128 * y as i128, bits))?;
        let mut out = a.derive(shape, payload);
        out.level = level;
        out.depth = depth;
        Ok(out)
    }

    pub fn negate(&self, a: &CipherTensor) -> HeResult<CipherTensor> {
        let payload = match &a.payload {
            Payload::Shadow(v) => Payload::Shadow(Arc::new(v.iter().map(|x| -x).collect())),
            Payload::Fixed(v) => Payload::Fixed(Arc::new(v.iter().map(|x| -x).collect())),
        };
        Ok(a.derive(a.shape.clone(), payload))
    }

    pub fn sum_axis(&self, a: &CipherTensor, axis: usize, keepdim: bool) -> HeResult<CipherTensor> {
        let (shape, payload) = match &a.payload {
            Payload::Shadow(v) => {
                let (s, d) = layout::reduce_axis(v, &a.shape, axis, keepdim, |x, y| x + y)?;
                (s, Payload::Shadow(Arc::new(finite(d, "ct_sum")?)))
            }
            Payload::Fixed(v) => {
                let opt: Vec<Option<i64>> = v.iter().map(|x| Some(*x)).collect();
                let (s, d) = layout::reduce_axis(&opt, &a.shape, axis, keepdim, |x, y| x?.checked_add(y?))?;
                (s, Payload::Fixed(Arc::new(all_some(d, "ct_sum")?)))
            }
        };
        Ok(a.derive(shape, payload))
    }

    pub fn transpose(&self, a: &CipherTensor) -> HeResult<CipherTensor> {
        let (shape, payload) = match &a.payload {
            Payload::Shadow(v) => {
                let (s, d) = layout::transpose2(v, &a.shape)?;
                (s, Payload::Shadow(Arc::new(d)))
            }
            Payload::Fixed(v) => {
                let (s, d) = layout::transpose2(v, &a.shape)?;
                (s, Payload::Fixed(Arc::new(d)))
            }
        };
        Ok(a.derive(shape, payload))
    }

    pub fn slice_rows(&self, a: &CipherTensor, start: usize, end: usize) -> HeResult<CipherTensor> {
        let (shape, payload) = match &a.payload {
            Payload::Shadow(v) => {
                let (s, d) = layout::slice_rows(v, &a.shape, start, end)?;
                (s, Payload::Shadow(Arc::new(d)))
            }
            Payload::Fixed(v) => {
                let (s, d) = layout::slice_rows(v, &a.shape, start, end)?;
                (s, Payload::Fixed(Arc::new(d)))
            }
        };
        Ok(a.derive(shape, payload))
    }

    pub fn slice_cols(&self, a: &CipherTensor, start: usize, end: usize) -> HeResult<CipherTensor> {
        let (shape, payload) = match &a.payload {
            Payload::Shadow(v) => {
                let (s, d) = layout::slice_cols(v, &a.shape, start, end)?;
                (s, Payload::Shadow(Arc::new(d)))
            }
            Payload::Fixed(v) => {
                let (s, d) = layout::slice_cols(v, &a.shape, start, end)?;
                (s, Payload::Fixed(Arc::new(d)))
            }
        };
        Ok(a.derive(shape, payload))
    }

    fn concat(&self, parts: &[CipherTensor], rows: bool) -> HeResult<CipherTensor> {
        let first = parts.first().ok_or(HeError::Tensor(crate::tensor::TensorError::Empty("ct_concat")))?;
        for p in parts {
            self.check_compat(first, p)?;
        }
        let level = parts.iter().map(|p| p.level).max().unwrap_or(0);
        let depth = parts.iter().map(|p| p.depth).max().unwrap_or(0);
        let cat = |views: &[(&[usize], &[f64])]| {
            if rows {
                layout::concat_rows(views)
            } else {
                layout::concat_cols(views)
            }
        };
        let cat_i = |views: &[(&[usize], &[i64])]| {
            if rows {
                layout::concat_rows(views)
            } else {
                layout::concat_cols(views)
            }
        };
        let (shape, payload) = match &first.payload {
            Payload::Shadow(_) => {
                let views: Vec<(&[usize], &[f64])> = parts
                    .iter()
                    .map(|p| match &p.payload {
                        Payload::Shadow(v) => (p.shape.as_slice(), v.as_slice()),
                        Payload::Fixed(_) => unreachable!("backend checked"),
                    })
                    .collect();
                let (s, d) = cat(&views)?;
                (s, Payload::Shadow(Arc::new(d)))
            }
            Payload::Fixed(_) => {
                let views: Vec<(&[usize], &[i64])> = parts
                    .iter()
                    .map(|p| match &p.payload {
                        Payload::Fixed(v) => (p.shape.as_slice(), v.as_slice()),
                        Payload::Shadow(_) => unreachable!("backend checked"),
                    })
                    .collect();
                let (s, d) = cat_i(&views)?;
                (s, Payload::Fixed(Arc::new(d)))
            }
        };
        let mut out = first.derive(shape, payload);
        out.level = level;
        out.depth = depth;
        Ok(out)
    }

    pub fn concat_rows(&self, parts: &[CipherTensor]) -> HeResult<CipherTensor> {
        self.concat(parts, true)
    }

    pub fn concat_cols(&self, parts: &[CipherTensor]) -> HeResult<CipherTensor> {
        self.concat(parts, false)
    }

    pub fn div(&self, _a: &CipherTensor, _b: &CipherTensor) -> HeResult<CipherTensor> {
        Err(HeError::UnsupportedOp("div"))
    }

    pub fn exp(&self, _a: &CipherTensor) -> HeResult<CipherTensor> {
        Err(HeError::UnsupportedOp("exp"))
    }

    pub fn compare(&self, _a: &CipherTensor, _b: &CipherTensor) -> HeResult<CipherTensor> {
        Err(HeError::UnsupportedOp("compare"))
    }

    pub fn max(&self, _a: &CipherTensor, _b: &CipherTensor) -> HeResult<CipherTensor> {
        Err(HeError::UnsupportedOp("max"))
    }

    /// Ciphertext by plaintext-weight product as a sum of broadcast
    /// element-wise products, `sum_j colbcast(a[:, j]) * rowbcast(w[j, :])`.
    /// Costs exactly one multiplicative level regardless of the inner size.
    pub fn lower_matmul(&self, a: &CipherTensor, w: &Tensor) -> HeResult<CipherTensor> {
        let (_, k) = layout::expect_matrix("lower_matmul", &a.shape)?;
        let (k2, _) = layout::expect_matrix("lower_matmul", w.shape())?;
        if k != k2 || k == 0 {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "lower_matmul",
                lhs: a.shape.clone(),
                rhs: w.shape().to_vec(),
            }
            .into());
        }
        let mut acc: Option<CipherTensor> = None;
        for j in 0..k {
            let col = self.slice_cols(a, j, j + 1)?;
            let row = w.slice_rows(j, j + 1)?;
            let term = self.mul_plain(&col, &row)?;
            acc = Some(match acc {
                None => term,
                Some(s) => self.add(&s, &term)?,
            });
        }
        Ok(acc.expect("k > 0"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::he::HeParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shadow() -> HeContext {
        HeContext::shadow(HeParams::default()).unwrap()
    }

    fn fixed() -> HeContext {
        HeContext::fixed_point(HeParams::default()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], lim: f64) -> Tensor {
        let n = layout::numel(shape);
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-lim..lim)).collect()).unwrap()
    }

    #[test]
    fn shadow_round_trip_is_exact() {
        let ctx = shadow();
        let key = KeyPair::from_seed(1);
        let x = Tensor::vector(vec![1.5, -2.25]);
        let ct = ctx.encrypt(&x, &key).unwrap();
        assert_eq!((ct.level(), ct.depth()), (0, 0));
        assert_eq!(ctx.decrypt(&ct, &key).unwrap(), x);
    }

    #[test]
    fn wrong_key_is_rejected() {
        let ctx = fixed();
        let ct = ctx.encrypt(&Tensor::vector(vec![1.0]), &KeyPair::from_seed(1)).unwrap();
        assert!(matches!(ctx.decrypt(&ct, &KeyPair::from_seed(2)), Err(HeError::KeyMismatch { .. })));
        let other = ctx.encrypt(&Tensor::vector(vec![1.0]), &KeyPair::from_seed(2)).unwrap();
        assert!(matches!(ctx.add(&ct, &other), Err(HeError::KeyMismatch { .. })));
    }

    #[test]
    fn fixed_point_round_trip_bound() {
        let ctx = fixed();
        let key = KeyPair::from_seed(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bound = 2f64.powi(-(ctx.params.scale_bits as i32) + 1);
        for _ in 0..20 {
            let x = random(&mut rng, &[64], 100.0);
            let back = ctx.decrypt(&ctx.encrypt(&x, &key).unwrap(), &key).unwrap();
            assert!(back.max_abs_diff(&x).unwrap() <= bound);
        }
    }

    #[test]
    fn add_and_mul_homomorphisms() {
        let ctx = shadow();
        let key = KeyPair::from_seed(5);
        let a = ctx.encrypt(&Tensor::vector(vec![2.0]), &key).unwrap();
        let b = ctx.encrypt(&Tensor::vector(vec![3.0]), &key).unwrap();
        assert_eq!(ctx.decrypt(&ctx.add(&a, &b).unwrap(), &key).unwrap().item(), 5.0);
        let p = ctx.mul(&a, &b).unwrap();
        assert_eq!(ctx.decrypt(&p, &key).unwrap().item(), 6.0);
        assert_eq!(p.depth(), 1);
    }

    #[test]
    fn add_depth_is_max() {
        let ctx = HeContext::shadow(HeParams::with_levels(8192, 4).unwrap()).unwrap();
        let key = KeyPair::from_seed(6);
        let x = ctx.encrypt(&Tensor::vector(vec![1.1]), &key).unwrap();
        let mut d2 = ctx.mul(&x, &x).unwrap();
        d2 = ctx.mul(&d2, &ctx.mod_switch(&x, 1).unwrap()).unwrap();
        let d3 = ctx.mul_plain(&d2, &Tensor::scalar(2.0)).unwrap();
        assert_eq!((d2.depth(), d3.depth()), (2, 3));
        let (a, b) = ctx.align(&d2, &d3).unwrap();
        assert_eq!(ctx.add(&a, &b).unwrap().depth(), 3);
        assert!(matches!(ctx.add(&d2, &d3), Err(HeError::LevelMismatch { .. })));
    }

    #[test]
    fn chain_exceeds_budget_at_kth_multiplication() {
        for k in 2..6u16 {
            let ctx = HeContext::shadow(HeParams::with_levels(4096, (k - 2) as usize).unwrap()).unwrap();
            assert_eq!(ctx.level_budget(), k - 1);
            let key = KeyPair::from_seed(7);
            let mut ct = ctx.encrypt(&Tensor::vector(vec![1.0]), &key).unwrap();
            for i in 1..=k {
                let r = ctx.mul_plain(&ct, &Tensor::scalar(1.0));
                if i < k {
                    ct = r.unwrap();
                } else {
                    assert!(matches!(r, Err(HeError::DepthExceeded { .. })), "k={k}");
                }
            }
        }
    }

    #[test]
    fn fixed_point_add_and_product_chain_error() {
        let ctx = HeContext::fixed_point(HeParams::with_levels(8192, 6).unwrap()).unwrap();
        let key = KeyPair::from_seed(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let add_bound = 2f64.powi(-(ctx.params.scale_bits as i32) + 2);
        for _ in 0..10 {
            let a = random(&mut rng, &[32], 4.0);
            let b = random(&mut rng, &[32], 4.0);
            let s = ctx.add(&ctx.encrypt(&a, &key).unwrap(), &ctx.encrypt(&b, &key).unwrap()).unwrap();
            let d = ctx.decrypt(&s, &key).unwrap();
            assert!(d.max_abs_diff(&a.add(&b).unwrap()).unwrap() <= add_bound);
        }
        // 5-deep product chain, factors bounded away from zero
        for _ in 0..10 {
            let xs: Vec<Tensor> = (0..6)
                .map(|_| Tensor::vector((0..32).map(|_| rng.random_range(0.5..2.0)).collect()))
                .collect();
            let mut ct = ctx.encrypt(&xs[0], &key).unwrap();
            let mut plain = xs[0].clone();
            for x in &xs[1..] {
                let c = ctx.mod_switch(&ctx.encrypt(x, &key).unwrap(), ct.level()).unwrap();
                ct = ctx.mul(&ct, &c).unwrap();
                plain = plain.mul(x).unwrap();
            }
            assert_eq!(ct.depth(), 5);
            let d = ctx.decrypt(&ct, &key).unwrap();
            for (got, want) in d.data().iter().zip(plain.data()) {
                assert!(((got - want) / want).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn forbidden_ops() {
        let ctx = shadow();
        let key = KeyPair::from_seed(10);
        let a = ctx.encrypt(&Tensor::vector(vec![1.0]), &key).unwrap();
        assert_eq!(ctx.max(&a, &a).unwrap_err(), HeError::UnsupportedOp("max"));
        assert_eq!(ctx.exp(&a).unwrap_err(), HeError::UnsupportedOp("exp"));
        assert_eq!(ctx.div(&a, &a).unwrap_err(), HeError::UnsupportedOp("div"));
        assert_eq!(ctx.compare(&a, &a).unwrap_err(), HeError::UnsupportedOp("compare"));
    }

    #[test]
    fn lowered_matmul_matches_plaintext_bitwise() {
        let ctx = shadow();
        let key = KeyPair::from_seed(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random(&mut rng, &[4, 5], 3.0);
        let w = random(&mut rng, &[5, 3], 3.0);
        let ct = ctx.encrypt(&a, &key).unwrap();
        let out = ctx.lower_matmul(&ct, &w).unwrap();
        assert_eq!(out.depth(), 1);
        assert_eq!(ctx.decrypt(&out, &key).unwrap(), a.matmul(&w).unwrap());
        let id = ctx.lower_matmul(&ct, &Tensor::identity(5)).unwrap();
        assert_eq!(ctx.decrypt(&id, &key).unwrap(), a);
    }

    #[test]
    fn lowered_matmul_adds_one_level() {
        let ctx = HeContext::shadow(HeParams::with_levels(8192, 4).unwrap()).unwrap();
        let key = KeyPair::from_seed(13);
        let mut ct = ctx.encrypt(&Tensor::identity(3), &key).unwrap();
        for d in 0..3 {
            assert_eq!(ct.depth(), d);
            ct = ctx.lower_matmul(&ct, &Tensor::identity(3)).unwrap();
        }
    }

    #[test]
    fn blob_round_trip_and_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let key = KeyPair::from_seed(15);
        for ctx in [shadow(), fixed()] {
            let x = random(&mut rng, &[3, 5000], 2.0);
            let ct = ctx.encrypt(&x, &key).unwrap();
            assert_eq!(ct.pack_count(), 4);
            let bytes = ct.to_bytes();
            assert_eq!(&bytes[..4], b"HEXC");
            assert_eq!(CipherTensor::from_bytes(&bytes).unwrap(), ct);
            for cut in [0, 3, 10, 40, bytes.len() - 1] {
                assert!(matches!(CipherTensor::from_bytes(&bytes[..cut]), Err(HeError::MalformedBlob(_))));
            }
        }
    }

    #[test]
    fn packing_disabled_limits_axis_length() {
        let mut params = HeParams { poly_modulus_degree: 1024, ..HeParams::default() };
        params.packing = false;
        let ctx = HeContext::shadow(params).unwrap();
        let key = KeyPair::from_seed(16);
        let ok = ctx.encrypt(&Tensor::zeros(&[4, 512]), &key).unwrap();
        assert_eq!(ok.pack_count(), 4);
        assert!(matches!(
            ctx.encrypt(&Tensor::zeros(&[1, 513]), &key),
            Err(HeError::TooManySlots { len: 513, slots: 512 })
        ));
    }
}
