//! Directory checkpoints: a `manifest.txt` of key=value lines and a
//! `params.bin` of little-endian f32 values in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::approx::SoftmaxEstimator;
use crate::model::{ModelConfig, ModelError, TransformerModel};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";
pub const PARAMS: &str = "params.bin";
pub const VOCAB: &str = "vocab.txt";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("manifest is missing `{0}`")]
    MissingKey(String),
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(String),
    #[error("parameter blob is {found} bytes, manifest describes {expected}")]
    BlobSize { expected: usize, found: usize },
    #[error("checkpoint holds no {0}")]
    WrongKind(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type CheckpointResult<T> = Result<T, CheckpointError>;

/// Everything a checkpoint directory can hold.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config: Option<ModelConfig>,
    /// Model parameters; estimator weights live under `est.`.
    pub params: BTreeMap<String, Tensor>,
    pub estimator_dim: Option<usize>,
    pub estimator_frozen: bool,
    pub vocab: Option<Vec<String>>,
    /// Free-form report or task metadata, stored as `meta.<key>`.
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_model(model: &TransformerModel) -> Self {
        let mut params = model.params().clone();
        let (mut estimator_dim, mut estimator_frozen) = (None, false);
        if let Some(e) = model.estimator() {
            params.extend(e.params.iter().map(|(k, v)| (format!("est.{k}"), v.clone())));
            estimator_dim = Some(e.dim);
            estimator_frozen = e.frozen;
        }
        Checkpoint { config: Some(model.config.clone()), params, estimator_dim, estimator_frozen, ..Default::default() }
    }

    pub fn from_estimator(est: &SoftmaxEstimator) -> Self {
        Checkpoint {
            params: est.params.iter().map(|(k, v)| (format!("est.{k}"), v.clone())).collect(),
            estimator_dim: Some(est.dim),
            estimator_frozen: est.frozen,
            ..Default::default()
        }
    }

    pub fn estimator(&self) -> CheckpointResult<SoftmaxEstimator> {
        let dim = self.estimator_dim.ok_or(CheckpointError::WrongKind("estimator"))?;
        let params = self
            .params
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("est.").map(|s| (s.to_string(), v.clone())))
            .collect();
        Ok(SoftmaxEstimator { dim, params, frozen: self.estimator_frozen })
    }

    pub fn model(&self) -> CheckpointResult<TransformerModel> {
        let config = self.config.clone().ok_or(CheckpointError::WrongKind("model"))?;
        let params = self.params.iter().filter(|(k, _)| !k.starts_with("est.")).map(|(k, v)| (k.clone(), v.clone())).collect();
        let est = if self.estimator_dim.is_some() { Some(self.estimator()?) } else { None };
        Ok(TransformerModel::from_parts(config, params, est)?)
    }

    pub fn save(&self, dir: &Path) -> CheckpointResult<()> {
        let io = |path: PathBuf| move |source| CheckpointError::Io { path, source };
        fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;
        let mut manifest = format!("format_version={FORMAT_VERSION}\n");
        if let Some(c) = &self.config {
            for (k, v) in config_fields(c) {
                manifest.push_str(&format!("config.{k}={v}\n"));
            }
        }
        if let Some(d) = self.estimator_dim {
            manifest.push_str(&format!("estimator.dim={d}\nestimator.frozen={}\n", self.estimator_frozen));
        }
        let mut blob = Vec::new();
        for (name, t) in &self.params {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("param.{name}=shape:{};dtype:f32;offset:{}\n", dims.join("x"), blob.len()));
            for v in t.data() {
                blob.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta.{k}={v}\n"));
        }
        fs::write(dir.join(MANIFEST), manifest).map_err(io(dir.join(MANIFEST)))?;
        fs::write(dir.join(PARAMS), blob).map_err(io(dir.join(PARAMS)))?;
        if let Some(v) = &self.vocab {
            let mut text = v.join("\n");
            text.push('\n');
            fs::write(dir.join(VOCAB), text).map_err(io(dir.join(VOCAB)))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> CheckpointResult<Self> {
        let io = |path: PathBuf| move |source| CheckpointError::Io { path, source };
        let text = fs::read_to_string(dir.join(MANIFEST)).map_err(io(dir.join(MANIFEST)))?;
        let blob = fs::read(dir.join(PARAMS)).map_err(io(dir.join(PARAMS)))?;
        let mut kv: Vec<(usize, String, String)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Manifest { line: i + 1, msg: "expected key=value".into() })?;
            kv.push((i + 1, k.to_string(), v.to_string()));
        }
        match kv.iter().find(|(_, k, _)| k == "format_version") {
            Some((_, _, v)) if v == &FORMAT_VERSION.to_string() => {}
            Some((_, _, v)) => return Err(CheckpointError::UnsupportedVersion(v.clone())),
            None => return Err(CheckpointError::MissingKey("format_version".into())),
        }
        let mut ck = Checkpoint::default();
        let mut config = BTreeMap::new();
        let mut expected = 0usize;
        for (line, k, v) in &kv {
            let bad = |msg: String| CheckpointError::Manifest { line: *line, msg };
            if let Some(name) = k.strip_prefix("param.") {
                let (shape, offset) = parse_param(v).map_err(bad)?;
                let n: usize = shape.iter().product();
                let end = offset + n * 4;
                if end > blob.len() {
                    return Err(CheckpointError::BlobSize { expected: end, found: blob.len() });
                }
                let data = blob[offset..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect();
                let t = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
                ck.params.insert(name.to_string(), t);
                expected += n * 4;
            } else if let Some(field) = k.strip_prefix("config.") {
                config.insert(field.to_string(), (*line, v.clone()));
            } else if let Some(m) = k.strip_prefix("meta.") {
                ck.meta.insert(m.to_string(), v.clone());
            } else if k == "estimator.dim" {
                ck.estimator_dim = Some(v.parse().map_err(|_| bad(format!("bad estimator dim `{v}`")))?);
            } else if k == "estimator.frozen" {
                ck.estimator_frozen = v.parse().map_err(|_| bad(format!("bad flag `{v}`")))?;
            } else if k != "format_version" {
                return Err(bad(format!("unknown key `{k}`")));
            }
        }
        if expected != blob.len() {
            return Err(CheckpointError::BlobSize { expected, found: blob.len() });
        }
        if !config.is_empty() {
            ck.config = Some(parse_config(&config)?);
        }
        let vocab_path = dir.join(VOCAB);
        if vocab_path.exists() {
            let text = fs::read_to_string(&vocab_path).map_err(io(vocab_path.clone()))?;
            ck.vocab = Some(text.lines().map(str::to_string).collect());
        }
        Ok(ck)
    }
}

fn parse_param(v: &str) -> Result<(Vec<usize>, usize), String> {
    let mut shape = None;
    let mut offset = None;
    for part in v.split(';') {
        match part.split_once(':') {
            Some(("shape", s)) => {
                shape = Some(s.split('x').map(|d| d.parse::<usize>().map_err(|_| format!("bad dim `{d}`"))).collect::<Result<Vec<_>, _>>()?)
            }
            Some(("dtype", "f32")) => {}
            Some(("dtype", d)) => return Err(format!("unsupported dtype `{d}`")),
            Some(("offset", o)) => offset = Some(o.parse::<usize>().map_err(|_| format!("bad offset `{o}`"))?),
            _ => return Err(format!("bad parameter field `{part}`")),
        }
    }
    match (shape, offset) {
        (Some(s), Some(o)) if o % 4 == 0 => Ok((s, o)),
        _ => Err("parameter needs shape and aligned offset".into()),
    }
}

fn config_fields(c: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("num_layers", c.num_layers.to_string()),
        ("hidden_size", c.hidden_size.to_string()),
        ("num_heads", c.num_heads.to_string()),
        ("ffn_size", c.ffn_size.to_string()),
        ("vocab_size", c.vocab_size.to_string()),
        ("max_seq_len", c.max_seq_len.to_string()),
        ("num_labels", c.num_labels.to_string()),
        ("head", c.head.to_string()),
        ("activation", c.activation.to_string()),
        ("softmax", c.softmax.to_string()),
        ("norm", c.norm.to_string()),
        ("mask_value", c.mask_value.to_string()),
        ("scale_absorbed", c.scale_absorbed.to_string()),
    ]
}

fn parse_config(fields: &BTreeMap<String, (usize, String)>) -> CheckpointResult<ModelConfig> {
    fn get<T: std::str::FromStr>(f: &BTreeMap<String, (usize, String)>, k: &str) -> CheckpointResult<T> {
        let (line, v) = f.get(k).ok_or_else(|| CheckpointError::MissingKey(format!("config.{k}")))?;
        v.parse().map_err(|_| CheckpointError::Manifest { line: *line, msg: format!("bad value `{v}` for {k}") })
    }
    Ok(ModelConfig {
        num_layers: get(fields, "num_layers")?,
        hidden_size: get(fields, "hidden_size")?,
        num_heads: get(fields, "num_heads")?,
        ffn_size: get(fields, "ffn_size")?,
        vocab_size: get(fields, "vocab_size")?,
        max_seq_len: get(fields, "max_seq_len")?,
        num_labels: get(fields, "num_labels")?,
        head: get(fields, "head")?,
        activation: get(fields, "activation")?,
        softmax: get(fields, "softmax")?,
        norm: get(fields, "norm")?,
        mask_value: get(fields, "mask_value")?,
        scale_absorbed: get(fields, "scale_absorbed")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::replace_ops;
    use crate::model::{Batch, HeadKind};

    #[test]
    fn model_round_trip_within_f32_error() {
        let cfg = ModelConfig { hidden_size: 8, ffn_size: 16, ..ModelConfig::new(12, 5, 3, HeadKind::Token) };
        let mut m = TransformerModel::new(cfg, 9).unwrap();
        replace_ops(&mut m, &SoftmaxEstimator::new(5, 2).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::from_model(&m);
        ck.vocab = Some(vec!["[PAD]".into(), "a".into()]);
        ck.meta.insert("task".into(), "tag".into());
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.vocab, ck.vocab);
        assert_eq!(back.meta, ck.meta);
        let loaded = back.model().unwrap();
        assert_eq!(loaded.config, m.config);
        assert!(loaded.estimator().unwrap().frozen);
        let b = Batch::from_sequences(&[&[2, 3, 4], &[5, 6, 7, 8, 9]], 5, 0).unwrap();
        let (x, y) = (m.logits(&b).unwrap(), loaded.logits(&b).unwrap());
        let rel = x.max_abs_diff(&y).unwrap() / x.max_abs().max(1e-12);
        assert!(rel <= 1e-6, "relative error {rel}");

        let blob = fs::metadata(dir.path().join(PARAMS)).unwrap().len() as usize;
        let elems: usize = ck.params.values().map(Tensor::len).sum();
        assert_eq!(blob, elems * 4);
    }

    #[test]
    fn saving_is_byte_deterministic() {
        let est = SoftmaxEstimator::new(4, 1).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        Checkpoint::from_estimator(&est).save(a.path()).unwrap();
        Checkpoint::from_estimator(&est).save(b.path()).unwrap();
        for f in [MANIFEST, PARAMS] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let back = Checkpoint::load(a.path()).unwrap();
        assert!(matches!(back.model(), Err(CheckpointError::WrongKind("model"))));
        assert_eq!(back.estimator().unwrap().dim, 4);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let est = SoftmaxEstimator::new(4, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        Checkpoint::from_estimator(&est).save(dir.path()).unwrap();
        let blob = fs::read(dir.path().join(PARAMS)).unwrap();
        fs::write(dir.path().join(PARAMS), &blob[..blob.len() - 4]).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(CheckpointError::BlobSize { .. })));
        fs::write(dir.path().join(PARAMS), &blob).unwrap();
        let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        fs::write(dir.path().join(MANIFEST), manifest.replace("format_version=1", "format_version=2")).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(CheckpointError::UnsupportedVersion(_))));
    }
}
