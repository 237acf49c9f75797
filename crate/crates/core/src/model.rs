//! Post-norm transformer encoder with swappable activation, softmax and
//! normalization, plus sequence- and token-level heads.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::approx::SoftmaxEstimator;
use crate::engine::{Engine, Eval, EvalError, EvalResult, OpTrace, Primitive, Traced};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds maximum {max}")]
    SeqTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    VocabOverflow { id: usize, vocab: usize },
    #[error("mask value {0} is not finite")]
    NonFiniteMaskValue(f64),
    #[error("estimated softmax selected but no estimator attached")]
    MissingEstimator,
    #[error("no affine norm at site {0}")]
    MissingAffineNorm(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("model is not HE-ready: {0}")]
    NotHeReady(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl From<crate::tensor::TensorError> for ModelError {
    fn from(e: crate::tensor::TensorError) -> Self {
        ModelError::Eval(e.into())
    }
}

pub type ModelResult<T> = Result<T, ModelError>;

macro_rules! str_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!("unknown {} `{other}`", stringify!($name))),
                }
            }
        }
    };
}

str_enum!(Activation { Gelu => "gelu", Relu => "relu" });
str_enum!(SoftmaxMode { Exact => "exact", Estimated => "estimated" });
str_enum!(NormMode { LayerNorm => "layernorm", Affine => "affine" });
str_enum!(HeadKind { Sequence => "sequence", Token => "token" });

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_labels: usize,
    pub head: HeadKind,
    pub activation: Activation,
    pub softmax: SoftmaxMode,
    pub norm: NormMode,
    pub mask_value: f64,
    pub scale_absorbed: bool,
}

impl ModelConfig {
    /// Two layers, hidden 128, two heads, FFN 512, everything exact.
    pub fn new(vocab_size: usize, max_seq_len: usize, num_labels: usize, head: HeadKind) -> Self {
        ModelConfig {
            num_layers: 2,
            hidden_size: 128,
            num_heads: 2,
            ffn_size: 512,
            vocab_size,
            max_seq_len,
            num_labels,
            head,
            activation: Activation::Gelu,
            softmax: SoftmaxMode::Exact,
            norm: NormMode::LayerNorm,
            mask_value: -3.0,
            scale_absorbed: false,
        }
    }

    /// A narrower variant of [`ModelConfig::new`] for quick experiments.
    pub fn small(vocab_size: usize, max_seq_len: usize, num_labels: usize, head: HeadKind) -> Self {
        ModelConfig { hidden_size: 32, ffn_size: 64, ..Self::new(vocab_size, max_seq_len, num_labels, head) }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> ModelResult<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.num_layers == 0 || self.hidden_size == 0 || self.num_heads == 0 || self.ffn_size == 0 {
            return bad("layer, hidden, head and ffn sizes must be positive".into());
        }
        if self.hidden_size % self.num_heads != 0 {
            return bad(format!("hidden size {} not divisible by {} heads", self.hidden_size, self.num_heads));
        }
        if self.hidden_size < 2 {
            return bad("hidden size must be at least 2".into());
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.num_labels == 0 {
            return bad("vocab, sequence length and label count must be positive".into());
        }
        if !self.mask_value.is_finite() {
            return Err(ModelError::NonFiniteMaskValue(self.mask_value));
        }
        Ok(())
    }

    /// Names of the normalization sites in forward order.
    pub fn norm_sites(&self) -> Vec<String> {
        let mut sites = vec!["emb.norm".to_string()];
        for l in 0..self.num_layers {
            sites.push(format!("layer{l}.attn.norm"));
            sites.push(format!("layer{l}.ffn.norm"));
        }
        sites
    }
}

/// A padded batch: `ids` is `batch x seq` row-major, `masks[b][j]` marks
/// padding at position `j` of example `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub masks: Vec<Vec<bool>>,
    pub seq: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Pads each token sequence to `seq` with `pad_id`.
    pub fn from_sequences(seqs: &[&[usize]], seq: usize, pad_id: usize) -> ModelResult<Batch> {
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        let mut masks = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.len() > seq {
                return Err(ModelError::SeqTooLong { len: s.len(), max: seq });
            }
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(pad_id, seq - s.len()));
            masks.push((0..seq).map(|j| j >= s.len()).collect());
        }
        Ok(Batch { ids, masks, seq })
    }
}

/// Adds `mask_value` to every score in a masked column.
pub fn apply_mask(scores: &Tensor, mask: &[bool], mask_value: f64) -> ModelResult<Tensor> {
    if !mask_value.is_finite() {
        return Err(ModelError::NonFiniteMaskValue(mask_value));
    }
    Ok(scores.add(&mask_row(mask, mask_value))?)
}

fn mask_row(mask: &[bool], mask_value: f64) -> Tensor {
    Tensor::vector(mask.iter().map(|&m| if m { mask_value } else { 0.0 }).collect())
}

/// Layer normalization over the last axis of a matrix.
pub fn layer_norm<E: Engine>(
    eng: &mut E,
    x: &E::Value,
    gamma: &E::Value,
    beta: &E::Value,
    eps: f64,
) -> EvalResult<E::Value> {
    let n = *eng.shape(x).last().unwrap_or(&1) as f64;
    let s = eng.sum_axis(x, 1, true)?;
    let mean = eng.scale(&s, 1.0 / n)?;
    let c = eng.sub(x, &mean)?;
    let sq = eng.mul(&c, &c)?;
    let vs = eng.sum_axis(&sq, 1, true)?;
    let var = eng.scale(&vs, 1.0 / n)?;
    let e = eng.constant(Tensor::scalar(eps))?;
    let ve = eng.add(&var, &e)?;
    let std = eng.sqrt(&ve)?;
    let y = eng.div(&c, &std)?;
    let g = eng.mul(&y, gamma)?;
    eng.add(&g, beta)
}

/// `x * gamma + beta`, feature-wise.
pub fn affine_norm<E: Engine>(eng: &mut E, x: &E::Value, gamma: &E::Value, beta: &E::Value) -> EvalResult<E::Value> {
    let g = eng.mul(x, gamma)?;
    eng.add(&g, beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    estimator: Option<SoftmaxEstimator>,
}

type Observer<'o, V> = Option<&'o mut dyn FnMut(&str, &V)>;

impl TransformerModel {
    pub fn new(config: ModelConfig, seed: u64) -> ModelResult<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let (h, f) = (config.hidden_size, config.ffn_size);
        let mut normal = |shape: &[usize], std: f64| {
            let d = Normal::new(0.0, std).expect("positive std");
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(&mut rng)).collect()).expect("shape")
        };
        let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        params.insert("emb.tok".into(), normal(&[config.vocab_size, h], 1.0));
        params.insert("emb.pos".into(), normal(&[config.max_seq_len, h], 1.0));
        for l in 0..config.num_layers {
            for p in ["q", "k", "v", "o"] {
                params.insert(format!("layer{l}.attn.{p}.weight"), normal(&[h, h], inv(h)));
                params.insert(format!("layer{l}.attn.{p}.bias"), Tensor::zeros(&[h]));
            }
            params.insert(format!("layer{l}.ffn.in.weight"), normal(&[h, f], inv(h)));
            params.insert(format!("layer{l}.ffn.in.bias"), Tensor::zeros(&[f]));
            params.insert(format!("layer{l}.ffn.out.weight"), normal(&[f, h], inv(f)));
            params.insert(format!("layer{l}.ffn.out.bias"), Tensor::zeros(&[h]));
        }
        params.insert("head.weight".into(), normal(&[h, config.num_labels], inv(h)));
        params.insert("head.bias".into(), Tensor::zeros(&[config.num_labels]));
        for site in config.norm_sites() {
            params.insert(format!("{site}.ln.gamma"), Tensor::ones(&[h]));
            params.insert(format!("{site}.ln.beta"), Tensor::zeros(&[h]));
        }
        Ok(TransformerModel { config, params, estimator: None })
    }

    /// Rebuilds a model from stored parameters, checking every expected
    /// name and shape is present.
    pub fn from_parts(
        config: ModelConfig,
        params: BTreeMap<String, Tensor>,
        estimator: Option<SoftmaxEstimator>,
    ) -> ModelResult<Self> {
        config.validate()?;
        let reference = TransformerModel::new(config.clone(), 0)?;
        for (name, t) in &reference.params {
            if name.contains(".ln.") && config.norm == NormMode::Affine {
                continue;
            }
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(ModelError::InvalidConfig(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(ModelError::MissingParam(name.clone())),
            }
        }
        let model = TransformerModel { config, params, estimator };
        if model.config.softmax == SoftmaxMode::Estimated && model.estimator.is_none() {
            return Err(ModelError::MissingEstimator);
        }
        if model.config.norm == NormMode::Affine {
            model.require_affine()?;
        }
        Ok(model)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> ModelResult<&Tensor> {
        if let Some(rest) = name.strip_prefix("est.") {
            return self
                .estimator
                .as_ref()
                .and_then(|e| e.params.get(rest))
                .ok_or_else(|| ModelError::MissingParam(name.into()));
        }
        self.params.get(name).ok_or_else(|| ModelError::MissingParam(name.into()))
    }

    pub fn param_mut(&mut self, name: &str) -> ModelResult<&mut Tensor> {
        if let Some(rest) = name.strip_prefix("est.") {
            return self
                .estimator
                .as_mut()
                .and_then(|e| e.params.get_mut(rest))
                .ok_or_else(|| ModelError::MissingParam(name.into()));
        }
        self.params.get_mut(name).ok_or_else(|| ModelError::MissingParam(name.into()))
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) {
        self.params.insert(name.to_string(), value);
    }

    pub fn remove_param(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
    }

    pub fn estimator(&self) -> Option<&SoftmaxEstimator> {
        self.estimator.as_ref()
    }

    pub fn estimator_mut(&mut self) -> Option<&mut SoftmaxEstimator> {
        self.estimator.as_mut()
    }

    pub fn set_estimator(&mut self, est: Option<SoftmaxEstimator>) {
        self.estimator = est;
    }

    /// Every parameter name, estimator weights included as `est.*`.
    pub fn all_param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.params.keys().cloned().collect();
        if let Some(e) = &self.estimator {
            names.extend(e.params.keys().map(|k| format!("est.{k}")));
        }
        names
    }

    /// Order-stable digest of the parameters selected by `filter`.
    pub fn param_digest(&self, filter: impl Fn(&str) -> bool) -> u64 {
        let mut h = DefaultHasher::new();
        for name in self.all_param_names() {
            if !filter(&name) {
                continue;
            }
            name.hash(&mut h);
            let t = self.param(&name).expect("listed");
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn has_exact_ln(&self) -> bool {
        self.params.keys().any(|k| k.contains(".ln."))
    }

    pub fn has_affine(&self) -> bool {
        self.config.norm_sites().iter().all(|s| self.params.contains_key(&format!("{s}.affine.gamma")))
    }

    pub fn require_affine(&self) -> ModelResult<()> {
        for s in self.config.norm_sites() {
            for p in ["gamma", "beta"] {
                if !self.params.contains_key(&format!("{s}.affine.{p}")) {
                    return Err(ModelError::MissingAffineNorm(s));
                }
            }
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[usize], seq: usize) -> ModelResult<()> {
        if seq > self.config.max_seq_len {
            return Err(ModelError::SeqTooLong { len: seq, max: self.config.max_seq_len });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(ModelError::VocabOverflow { id, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Token plus position embedding, `[batch*seq x hidden]`.
    pub fn embed_with<E: Engine>(&self, eng: &mut E, ids: &[usize], seq: usize) -> ModelResult<E::Value> {
        self.check_ids(ids, seq)?;
        let tok = eng.param("emb.tok", self.param("emb.tok")?)?;
        let pos = eng.param("emb.pos", self.param("emb.pos")?)?;
        let positions: Vec<usize> = (0..ids.len()).map(|i| i % seq.max(1)).collect();
        let t = eng.gather_rows(&tok, ids)?;
        let p = eng.gather_rows(&pos, &positions)?;
        Ok(eng.add(&t, &p)?)
    }

    pub fn embed(&self, ids: &[usize], seq: usize) -> ModelResult<Tensor> {
        self.embed_with(&mut Eval, ids, seq)
    }

    pub fn forward_tokens<E: Engine>(&self, eng: &mut E, batch: &Batch) -> ModelResult<E::Value> {
        let x = self.embed_with(eng, &batch.ids, batch.seq)?;
        self.forward_embeddings(eng, x, &batch.masks)
    }

    pub fn forward_embeddings<E: Engine>(&self, eng: &mut E, x: E::Value, masks: &[Vec<bool>]) -> ModelResult<E::Value> {
        self.forward_inner(eng, x, masks, None)
    }

    /// Forward pass that reports every normalization input to `obs`.
    pub fn forward_observed<E: Engine>(
        &self,
        eng: &mut E,
        x: E::Value,
        masks: &[Vec<bool>],
        obs: &mut dyn FnMut(&str, &E::Value),
    ) -> ModelResult<E::Value> {
        self.forward_inner(eng, x, masks, Some(obs))
    }

    pub fn logits(&self, batch: &Batch) -> ModelResult<Tensor> {
        self.forward_tokens(&mut Eval, batch)
    }

    fn linear<E: Engine>(&self, eng: &mut E, x: &E::Value, prefix: &str) -> ModelResult<E::Value> {
        let wn = format!("{prefix}.weight");
        let bn = format!("{prefix}.bias");
        let w = eng.param(&wn, self.param(&wn)?)?;
        let b = eng.param(&bn, self.param(&bn)?)?;
        let y = eng.matmul(x, &w)?;
        Ok(eng.add(&y, &b)?)
    }

    fn norm<E: Engine>(&self, eng: &mut E, site: &str, x: &E::Value, obs: &mut Observer<'_, E::Value>) -> ModelResult<E::Value> {
        if let Some(o) = obs.as_mut() {
            o(site, x);
        }
        eng.mark(site);
        match self.config.norm {
            NormMode::LayerNorm => {
                let (gn, bn) = (format!("{site}.ln.gamma"), format!("{site}.ln.beta"));
                let g = eng.param(&gn, self.param(&gn)?)?;
                let b = eng.param(&bn, self.param(&bn)?)?;
                Ok(layer_norm(eng, x, &g, &b, LN_EPS)?)
            }
            NormMode::Affine => {
                let (gn, bn) = (format!("{site}.affine.gamma"), format!("{site}.affine.beta"));
                let gt = self.params.get(&gn).ok_or_else(|| ModelError::MissingAffineNorm(site.into()))?;
                let bt = self.params.get(&bn).ok_or_else(|| ModelError::MissingAffineNorm(site.into()))?;
                let g = eng.param(&gn, gt)?;
                let b = eng.param(&bn, bt)?;
                Ok(affine_norm(eng, x, &g, &b)?)
            }
        }
    }

    fn forward_inner<E: Engine>(
        &self,
        eng: &mut E,
        x: E::Value,
        masks: &[Vec<bool>],
        mut obs: Observer<'_, E::Value>,
    ) -> ModelResult<E::Value> {
        let cfg = &self.config;
        let b = masks.len();
        let seq = masks.first().map(|m| m.len()).unwrap_or(0);
        if b == 0 || seq == 0 || masks.iter().any(|m| m.len() != seq) {
            return Err(ModelError::InvalidConfig("batch masks must be non-empty and equally long".into()));
        }
        if seq > cfg.max_seq_len {
            return Err(ModelError::SeqTooLong { len: seq, max: cfg.max_seq_len });
        }
        let shape = eng.shape(&x);
        if shape != [b * seq, cfg.hidden_size] {
            return Err(ModelError::InvalidConfig(format!(
                "input shape {shape:?}, expected [{}, {}]",
                b * seq,
                cfg.hidden_size
            )));
        }
        if cfg.softmax == SoftmaxMode::Estimated && self.estimator.is_none() {
            return Err(ModelError::MissingEstimator);
        }
        let mut h = self.norm(eng, "emb.norm", &x, &mut obs)?;
        for l in 0..cfg.num_layers {
            let a = self.attention(eng, l, &h, masks)?;
            let r = eng.add(&a, &h)?;
            h = self.norm(eng, &format!("layer{l}.attn.norm"), &r, &mut obs)?;
            eng.mark(&format!("layer{l}.ffn"));
            let f = self.linear(eng, &h, &format!("layer{l}.ffn.in"))?;
            let f = match cfg.activation {
                Activation::Gelu => eng.gelu(&f)?,
                Activation::Relu => eng.relu(&f)?,
            };
            let f = self.linear(eng, &f, &format!("layer{l}.ffn.out"))?;
            let r = eng.add(&f, &h)?;
            h = self.norm(eng, &format!("layer{l}.ffn.norm"), &r, &mut obs)?;
        }
        eng.mark("head");
        match cfg.head {
            HeadKind::Sequence => {
                let firsts = (0..b).map(|i| eng.slice_rows(&h, i * seq, i * seq + 1)).collect::<EvalResult<Vec<_>>>()?;
                let cls = if b == 1 { firsts[0].clone() } else { eng.concat_rows(&firsts)? };
                self.linear(eng, &cls, "head")
            }
            HeadKind::Token => self.linear(eng, &h, "head"),
        }
    }

    /// Multi-head self-attention over `[batch*seq x hidden]`. All heads of
    /// all examples go through one softmax stage so each relu inside the
    /// estimator is a single delegation per layer.
    fn attention<E: Engine>(&self, eng: &mut E, l: usize, h: &E::Value, masks: &[Vec<bool>]) -> ModelResult<E::Value> {
        let cfg = &self.config;
        let (b, seq) = (masks.len(), masks[0].len());
        let (heads, dh) = (cfg.num_heads, cfg.head_dim());
        eng.mark(&format!("layer{l}.attn.qkv"));
        let q = self.linear(eng, h, &format!("layer{l}.attn.q"))?;
        let k = self.linear(eng, h, &format!("layer{l}.attn.k"))?;
        let v = self.linear(eng, h, &format!("layer{l}.attn.v"))?;
        let block = |eng: &mut E, t: &E::Value, i: usize, j: usize| -> EvalResult<E::Value> {
            let rows = eng.slice_rows(t, i * seq, (i + 1) * seq)?;
            eng.slice_cols(&rows, j * dh, (j + 1) * dh)
        };
        eng.mark(&format!("layer{l}.attn.scores"));
        let mut scores = Vec::with_capacity(b * heads);
        let mut values = Vec::with_capacity(b * heads);
        for i in 0..b {
            for j in 0..heads {
                let qb = block(eng, &q, i, j)?;
                let kb = block(eng, &k, i, j)?;
                let kt = eng.transpose(&kb)?;
                scores.push(eng.matmul(&qb, &kt)?);
                values.push(block(eng, &v, i, j)?);
            }
        }
        let mut s = if scores.len() == 1 { scores[0].clone() } else { eng.concat_rows(&scores)? };
        if !cfg.scale_absorbed {
            s = eng.scale(&s, 1.0 / (dh as f64).sqrt())?;
        }
        if masks.iter().any(|m| m.iter().any(|&p| p)) {
            let mut data = Vec::with_capacity(b * heads * seq * seq);
            for m in masks {
                let row = mask_row(m, cfg.mask_value);
                for _ in 0..heads * seq {
                    data.extend_from_slice(row.data());
                }
            }
            let mask = eng.constant(Tensor::new(vec![b * heads * seq, seq], data)?)?;
            s = eng.add(&s, &mask)?;
        }
        eng.mark(&format!("layer{l}.attn.softmax"));
        let p = match cfg.softmax {
            SoftmaxMode::Exact => eng.softmax_rows(&s)?,
            SoftmaxMode::Estimated => self.estimator.as_ref().ok_or(ModelError::MissingEstimator)?.forward(eng, &s)?,
        };
        eng.mark(&format!("layer{l}.attn.context"));
        let mut rows = Vec::with_capacity(b);
        for i in 0..b {
            let mut cols = Vec::with_capacity(heads);
            for j in 0..heads {
                let idx = i * heads + j;
                let pb = eng.slice_rows(&p, idx * seq, (idx + 1) * seq)?;
                cols.push(eng.matmul(&pb, &values[idx])?);
            }
            rows.push(if heads == 1 { cols[0].clone() } else { eng.concat_cols(&cols)? });
        }
        let ctx = if b == 1 { rows[0].clone() } else { eng.concat_rows(&rows)? };
        eng.mark(&format!("layer{l}.attn.out"));
        self.linear(eng, &ctx, &format!("layer{l}.attn.o"))
    }

    /// Folds `1/sqrt(d_k)` into the query projection. Idempotent.
    pub fn absorb_attention_scale(&mut self) -> ModelResult<()> {
        if self.config.scale_absorbed {
            return Ok(());
        }
        let c = 1.0 / (self.config.head_dim() as f64).sqrt();
        for l in 0..self.config.num_layers {
            for p in ["weight", "bias"] {
                let name = format!("layer{l}.attn.q.{p}");
                let t = self.param(&name)?.scale(c)?;
                self.params.insert(name, t);
            }
        }
        self.config.scale_absorbed = true;
        Ok(())
    }

    /// Op trace of one forward over a padded single-example input.
    pub fn op_trace(&self) -> ModelResult<OpTrace> {
        let seq = self.config.max_seq_len;
        let mask: Vec<bool> = (0..seq).map(|j| seq > 1 && j == seq - 1).collect();
        let x = Tensor::zeros(&[seq, self.config.hidden_size]);
        let mut t = Traced::new(Eval);
        self.forward_embeddings(&mut t, x, &[mask])?;
        Ok(t.trace)
    }

    /// Checks the model can be served under the HE contract: exact
    /// normalization dropped and a forward built from add, mul and relu only.
    pub fn check_he_ready(&self) -> ModelResult<OpTrace> {
        if self.has_exact_ln() {
            return Err(ModelError::NotHeReady("exact layer norm still present".into()));
        }
        let trace = self.op_trace()?;
        let bad = trace.offending();
        if !bad.is_empty() {
            let names: Vec<&str> = bad.iter().map(|p| Primitive::name(*p)).collect();
            return Err(ModelError::NotHeReady(format!("forward uses {}", names.join(", "))));
        }
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(head: HeadKind) -> ModelConfig {
        ModelConfig { hidden_size: 8, ffn_size: 16, ..ModelConfig::new(20, 6, 3, head) }
    }

    fn batch(rng: &mut ChaCha8Rng, n: usize, seq: usize, vocab: usize) -> Batch {
        let seqs: Vec<Vec<usize>> =
            (0..n).map(|_| (0..rng.random_range(1..=seq)).map(|_| rng.random_range(0..vocab)).collect()).collect();
        let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
        Batch::from_sequences(&refs, seq, 0).unwrap()
    }

    #[test]
    fn config_invariants() {
        let mut c = tiny(HeadKind::Sequence);
        assert!(c.validate().is_ok());
        c.num_heads = 3;
        assert!(matches!(c.validate(), Err(ModelError::InvalidConfig(_))));
        let c = ModelConfig { mask_value: f64::NEG_INFINITY, ..tiny(HeadKind::Sequence) };
        assert!(matches!(c.validate(), Err(ModelError::NonFiniteMaskValue(_))));
    }

    #[test]
    fn mask_examples() {
        let s = Tensor::vector(vec![1.0, 1.0]);
        assert_eq!(apply_mask(&s, &[false, true], 0.0).unwrap(), s);
        assert_eq!(apply_mask(&s, &[false, true], -3.0).unwrap().data(), &[1.0, -2.0]);
        assert!(apply_mask(&s, &[false, true], f64::NEG_INFINITY).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::ones(&[4]);
        let b = Tensor::zeros(&[4]);
        // already standardized: mean 0, variance 1
        let x = Tensor::matrix(1, 4, vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let y = layer_norm(&mut Eval, &x, &g, &b, LN_EPS).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-9);
        let c = Tensor::full(&[1, 4], 3.5);
        assert_eq!(layer_norm(&mut Eval, &c, &g, &b, LN_EPS).unwrap(), Tensor::zeros(&[1, 4]));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = Tensor::new(vec![5, 16], (0..80).map(|_| rng.random_range(-4.0..7.0)).collect()).unwrap();
        let y = layer_norm(&mut Eval, &r, &Tensor::ones(&[16]), &Tensor::zeros(&[16]), LN_EPS).unwrap();
        for row in 0..5 {
            let vals: Vec<f64> = (0..16).map(|c| y.at(row, c)).collect();
            let mean = vals.iter().sum::<f64>() / 16.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let m = TransformerModel::new(ModelConfig { num_layers: 1, ..tiny(HeadKind::Token) }, 1).unwrap();
        let x = Tensor::new(vec![1, 8], (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        // with one position, attention output equals the value projection
        let ctx = {
            let mut e = Eval;
            let h = m.norm(&mut e, "emb.norm", &x, &mut None).unwrap();
            let a = m.attention(&mut e, 0, &h, &[vec![false]]).unwrap();
            let v = m.linear(&mut e, &h, "layer0.attn.v").unwrap();
            let o = m.linear(&mut e, &v, "layer0.attn.o").unwrap();
            a.max_abs_diff(&o).unwrap()
        };
        assert!(ctx < 1e-12);
    }

    #[test]
    fn masked_weights_small_but_nonzero() {
        let scores = Tensor::matrix(1, 4, vec![0.0; 4]).unwrap();
        let masked = apply_mask(&scores, &[false, true, true, true], -3.0).unwrap();
        let p = masked.softmax(1).unwrap();
        for j in 1..4 {
            let ratio = p.at(0, j) / p.at(0, 0);
            assert!(ratio > 0.0 && (ratio - (-3.0f64).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn absorption_preserves_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = TransformerModel::new(tiny(HeadKind::Sequence), 2).unwrap();
        let mut a = m.clone();
        a.absorb_attention_scale().unwrap();
        let again = {
            let mut x = a.clone();
            x.absorb_attention_scale().unwrap();
            x
        };
        assert_eq!(again, a);
        for _ in 0..10 {
            let b = batch(&mut rng, 3, 6, 20);
            let d = m.logits(&b).unwrap().max_abs_diff(&a.logits(&b).unwrap()).unwrap();
            assert!(d < 1e-9);
        }
    }

    #[test]
    fn embeddings_path_matches_token_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = TransformerModel::new(tiny(HeadKind::Token), 3).unwrap();
        let b = batch(&mut rng, 2, 6, 20);
        let x = m.embed(&b.ids, b.seq).unwrap();
        let via_emb = m.forward_embeddings(&mut Eval, x, &b.masks).unwrap();
        assert_eq!(via_emb, m.logits(&b).unwrap());
        assert_eq!(via_emb.shape(), &[12, 3]);
        // determinism
        assert_eq!(m.logits(&b).unwrap(), TransformerModel::new(tiny(HeadKind::Token), 3).unwrap().logits(&b).unwrap());
    }

    #[test]
    fn input_validation() {
        let m = TransformerModel::new(tiny(HeadKind::Sequence), 3).unwrap();
        let long = Batch::from_sequences(&[&[1; 7]], 7, 0).unwrap();
        assert!(matches!(m.logits(&long), Err(ModelError::SeqTooLong { .. })));
        let oov = Batch::from_sequences(&[&[25]], 6, 0).unwrap();
        assert!(matches!(m.logits(&oov), Err(ModelError::VocabOverflow { id: 25, .. })));
    }

    #[test]
    fn exact_model_traces_tanh_only_in_gelu() {
        let m = TransformerModel::new(tiny(HeadKind::Sequence), 3).unwrap();
        let t = m.op_trace().unwrap();
        assert_eq!(t.count(Primitive::Tanh), m.config.num_layers);
        assert!(t.count(Primitive::Exp) > 0);
        let r = TransformerModel::new(ModelConfig { activation: Activation::Relu, ..tiny(HeadKind::Sequence) }, 3).unwrap();
        assert_eq!(r.op_trace().unwrap().count(Primitive::Tanh), 0);
        assert!(matches!(m.check_he_ready(), Err(ModelError::NotHeReady(_))));
    }
}
