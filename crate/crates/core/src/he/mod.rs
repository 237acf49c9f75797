//! Leveled homomorphic arithmetic over tensors.
//!
//! Two backends share one contract: a ciphertext supports addition and
//! multiplication only, every multiplication consumes one level of a finite
//! budget, and decryption requires the key that encrypted it. The shadow
//! backend carries plaintext values and enforces the contract exactly; the
//! fixed-point backend stores `round(x * 2^scale_bits)` integers and rescales
//! after every product, reproducing CKKS precision behaviour.

mod cipher;
mod depth;
mod engine;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::tensor::TensorError;

pub use cipher::{Backend, CipherTensor};
pub use depth::{static_depth, DagRecorder, DagNode, DagOp};
pub use engine::{he_forward, DepthReport, HeEngine, HeValue, LocalRelu, ReluChannel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HeError {
    #[error("ciphertext key {found} does not match {expected}")]
    KeyMismatch { expected: KeyId, found: KeyId },
    #[error("level mismatch: {lhs} vs {rhs}")]
    LevelMismatch { lhs: u16, rhs: u16 },
    #[error("scale mismatch: 2^{lhs} vs 2^{rhs}")]
    ScaleMismatch { lhs: u8, rhs: u8 },
    #[error("backend mismatch: {lhs} vs {rhs}")]
    BackendMismatch { lhs: Backend, rhs: Backend },
    #[error("multiplicative depth exceeded at {site}: depth {depth} > budget {budget}")]
    DepthExceeded { site: String, depth: u16, budget: u16 },
    #[error("operation `{0}` is not available on ciphertexts")]
    UnsupportedOp(&'static str),
    #[error("axis of length {len} exceeds {slots} slots with packing disabled")]
    TooManySlots { len: usize, slots: usize },
    #[error("fixed-point overflow in {0}")]
    Overflow(&'static str),
    #[error("malformed ciphertext blob: {0}")]
    MalformedBlob(String),
    #[error("invalid HE parameters: {0}")]
    InvalidParams(String),
    #[error("relu channel closed")]
    ChannelClosed,
    #[error("model: {0}")]
    Model(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type HeResult<T> = Result<T, HeError>;

pub const POLY_DEGREES: [usize; 5] = [1024, 2048, 4096, 8192, 16384];
pub const COEFF_BITS: [u8; 3] = [20, 30, 60];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeParams {
    pub poly_modulus_degree: usize,
    pub coeff_modulus_bits: Vec<u8>,
    pub scale_bits: u8,
    /// Split long tensors across slot packs; when off, each row is one pack.
    pub packing: bool,
}

impl Default for HeParams {
    fn default() -> Self {
        HeParams { poly_modulus_degree: 8192, coeff_modulus_bits: vec![60, 30, 30, 60], scale_bits: 30, packing: true }
    }
}

impl HeParams {
    pub fn new(degree: usize, coeff_bits: Vec<u8>) -> HeResult<Self> {
        let p = HeParams { poly_modulus_degree: degree, coeff_modulus_bits: coeff_bits, ..HeParams::default() };
        p.validate()?;
        Ok(p)
    }

    /// `[60, 30 x levels, 60]`, a chain with `levels + 1` rescales available.
    pub fn with_levels(degree: usize, levels: usize) -> HeResult<Self> {
        let mut bits = vec![60];
        bits.extend(std::iter::repeat_n(30, levels));
        bits.push(60);
        Self::new(degree, bits)
    }

    pub fn validate(&self) -> HeResult<()> {
        if !POLY_DEGREES.contains(&self.poly_modulus_degree) {
            return Err(HeError::InvalidParams(format!(
                "poly modulus degree {} not in {:?}",
                self.poly_modulus_degree, POLY_DEGREES
            )));
        }
        if let Some(b) = self.coeff_modulus_bits.iter().find(|b| !COEFF_BITS.contains(b)) {
            return Err(HeError::InvalidParams(format!("coeff modulus width {b} not in {COEFF_BITS:?}")));
        }
        if self.coeff_modulus_bits.len() < 2 {
            return Err(HeError::InvalidParams("need at least two coeff moduli".into()));
        }
        if self.coeff_modulus_bits.len() > u16::MAX as usize {
            return Err(HeError::InvalidParams("coeff modulus chain too long".into()));
        }
        if !(8..=40).contains(&self.scale_bits) {
            return Err(HeError::InvalidParams(format!("scale bits {} outside 8..=40", self.scale_bits)));
        }
        Ok(())
    }

    pub fn slot_count(&self) -> usize {
        self.poly_modulus_degree / 2
    }

    pub fn level_budget(&self) -> u16 {
        (self.coeff_modulus_bits.len() - 1) as u16
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(pub [u8; 16]);

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0[..4] {
            write!(f, "{b:02x}")?;
        }
        f.write_str("..")
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({self})")
    }
}

/// Client-held key. The secret seeds the fixed-point encryption noise and is
/// never serialized.
pub struct KeyPair {
    id: KeyId,
    secret: [u8; 32],
    nonce: AtomicU64,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("id", &self.id).finish_non_exhaustive()
    }
}

impl Clone for KeyPair {
    fn clone(&self) -> Self {
        KeyPair { id: self.id, secret: self.secret, nonce: AtomicU64::new(self.nonce.load(Ordering::Relaxed)) }
    }
}

impl KeyPair {
    pub fn generate(rng: &mut impl RngCore) -> Self {
        let mut id = [0u8; 16];
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut id);
        rng.fill_bytes(&mut secret);
        KeyPair { id: KeyId(id), secret, nonce: AtomicU64::new(0) }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::generate(&mut ChaCha20Rng::seed_from_u64(seed))
    }

    pub fn id(&self) -> KeyId {
        self.id
    }

    fn noise_stream(&self) -> ChaCha20Rng {
        let nonce = self.nonce.fetch_add(1, Ordering::Relaxed);
        let mut rng = ChaCha20Rng::from_seed(self.secret);
        rng.set_stream(nonce);
        rng
    }
}

/// Draws encryption noise in {-1, 0, 1} units of the last place.
fn noise(rng: &mut ChaCha20Rng) -> i64 {
    rng.random_range(-1..=1)
}

/// Stateless evaluator for one parameter set and backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeContext {
    pub params: HeParams,
    pub backend: Backend,
}

impl HeContext {
    pub fn new(params: HeParams, backend: Backend) -> HeResult<Self> {
        params.validate()?;
        Ok(HeContext { params, backend })
    }

    pub fn shadow(params: HeParams) -> HeResult<Self> {
        Self::new(params, Backend::Shadow)
    }

    pub fn fixed_point(params: HeParams) -> HeResult<Self> {
        Self::new(params, Backend::FixedPoint)
    }

    pub fn level_budget(&self) -> u16 {
        self.params.level_budget()
    }
}
