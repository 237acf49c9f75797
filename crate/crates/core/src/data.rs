//! Synthetic tasks, TSV ingestion and batching.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{Batch, HeadKind, ModelResult};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SPECIALS: usize = 3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("line {line}: label `{label}` not allowed for {kind} task")]
    LabelOutOfSchema { line: usize, label: String, kind: TaskKind },
    #[error("empty query")]
    EmptyQuery,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Classify,
    Regress,
    Tag,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classify => "classify",
            TaskKind::Regress => "regress",
            TaskKind::Tag => "tag",
        }
    }

    pub fn head(self) -> HeadKind {
        match self {
            TaskKind::Tag => HeadKind::Token,
            _ => HeadKind::Sequence,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            TaskKind::Classify => 0,
            TaskKind::Regress => 1,
            TaskKind::Tag => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(TaskKind::Classify),
            1 => Some(TaskKind::Regress),
            2 => Some(TaskKind::Tag),
            _ => None,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "classify" => Ok(TaskKind::Classify),
            "regress" => Ok(TaskKind::Regress),
            "tag" => Ok(TaskKind::Tag),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Class(usize),
    Score(f64),
    /// One entry per token position, `None` where no tag is scored.
    Tags(Vec<Option<usize>>),
}

/// A tokenized example. `tokens[0]` is the `[CLS]` marker.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(content: impl IntoIterator<Item = String>) -> Self {
        let mut tokens = vec!["[PAD]".to_string(), "[UNK]".to_string(), "[CLS]".to_string()];
        let mut index: BTreeMap<String, usize> = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        for t in content {
            if !index.contains_key(&t) {
                index.insert(t.clone(), tokens.len());
                tokens.push(t);
            }
        }
        Vocab { tokens, index }
    }

    /// `[PAD] [UNK] [CLS] w0 w1 ...` with `size` entries in total.
    pub fn synthetic(size: usize) -> Self {
        Self::from_tokens((0..size.saturating_sub(SPECIALS)).map(|i| format!("w{i}")))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("[UNK]")
    }

    /// Whitespace tokenization with a leading `[CLS]`; unknown words map to `[UNK]`.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>, DataError> {
        let words: Vec<usize> = text.split_whitespace().map(|w| self.id(w)).collect();
        if words.is_empty() {
            return Err(DataError::EmptyQuery);
        }
        let mut out = Vec::with_capacity(words.len() + 1);
        out.push(CLS);
        out.extend(words);
        Ok(out)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter(|&&i| i >= SPECIALS).map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    /// Total vocabulary including the three special tokens.
    pub vocab_size: usize,
    /// Maximum sequence length including `[CLS]`.
    pub seq_len: usize,
    pub num_classes: usize,
    pub rule_seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
}

impl SyntheticTaskSpec {
    pub fn default_for(kind: TaskKind) -> Self {
        SyntheticTaskSpec {
            kind,
            vocab_size: 64,
            seq_len: 16,
            num_classes: match kind {
                TaskKind::Classify => 2,
                TaskKind::Regress => 1,
                TaskKind::Tag => 4,
            },
            rule_seed: 17,
            train_size: 2000,
            dev_size: 400,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.seq_len < 4 {
            return bad(format!("seq_len {} too short", self.seq_len));
        }
        let content = self.vocab_size.saturating_sub(SPECIALS);
        match self.kind {
            TaskKind::Classify => {
                if self.num_classes < 2 {
                    return bad("classification needs at least two classes".into());
                }
                if content < self.num_classes * KEYWORDS_PER_CLASS + 4 {
                    return bad(format!("vocab {} too small for {} classes", self.vocab_size, self.num_classes));
                }
            }
            TaskKind::Regress => {
                if content < 4 {
                    return bad("vocab too small".into());
                }
            }
            TaskKind::Tag => {
                if self.num_classes < 2 {
                    return bad("tagging needs at least two classes".into());
                }
                if content < MARKERS + self.num_classes {
                    return bad("vocab too small".into());
                }
            }
        }
        if self.train_size == 0 || self.dev_size == 0 {
            return bad("train and dev sizes must be positive".into());
        }
        Ok(())
    }

    pub fn num_labels(&self) -> usize {
        match self.kind {
            TaskKind::Regress => 1,
            _ => self.num_classes,
        }
    }
}

const KEYWORDS_PER_CLASS: usize = 3;
const MARKERS: usize = 6;

/// The planted rule behind a synthetic task.
#[derive(Debug, Clone)]
struct Rule {
    /// Classification keywords, one list per class.
    keywords: Vec<Vec<usize>>,
    /// Regression per-token weights in [0, 1], indexed by token id.
    weights: Vec<f64>,
    /// Tagging base type per token id.
    types: Vec<usize>,
    markers: Vec<usize>,
}

impl Rule {
    fn new(spec: &SyntheticTaskSpec) -> Rule {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rule_seed);
        let mut content: Vec<usize> = (SPECIALS..spec.vocab_size).collect();
        content.shuffle(&mut rng);
        let keywords = (0..spec.num_classes.max(1))
            .map(|c| content.iter().skip(c * KEYWORDS_PER_CLASS).take(KEYWORDS_PER_CLASS).copied().collect())
            .collect();
        let weights = (0..spec.vocab_size).map(|_| rng.random_range(0.0..1.0)).collect();
        let classes = spec.num_classes.max(1);
        let types = (0..spec.vocab_size).map(|_| rng.random_range(0..classes)).collect();
        let markers = content.iter().rev().take(MARKERS).copied().collect();
        Rule { keywords, weights, types, markers }
    }
}

/// Train and dev splits plus everything needed to build a matching model.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub kind: TaskKind,
    pub num_labels: usize,
    pub seq_len: usize,
    pub vocab: Vocab,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

pub fn gen_synthetic(spec: &SyntheticTaskSpec, seed: u64) -> Result<TaskData, DataError> {
    spec.validate()?;
    let rule = Rule::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = spec.train_size + spec.dev_size;
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut examples = Vec::with_capacity(total);
    let keyword_set: HashSet<usize> = rule.keywords.iter().flatten().copied().collect();
    let fillers: Vec<usize> = (SPECIALS..spec.vocab_size).filter(|t| !keyword_set.contains(t)).collect();
    let mut attempts = 0;
    while examples.len() < total {
        attempts += 1;
        if attempts > total * 100 {
            return Err(DataError::InvalidSpec("could not draw enough distinct examples".into()));
        }
        let len = rng.random_range(3..spec.seq_len);
        let (tokens, label) = match spec.kind {
            TaskKind::Classify => {
                let class = examples.len() % spec.num_classes;
                let mut toks: Vec<usize> = (0..len).map(|_| *fillers.choose(&mut rng).expect("fillers")).collect();
                let kw = *rule.keywords[class].choose(&mut rng).expect("keywords");
                let at = rng.random_range(0..len);
                toks[at] = kw;
                (toks, Label::Class(class))
            }
            TaskKind::Regress => {
                let toks: Vec<usize> = (0..len).map(|_| rng.random_range(SPECIALS..spec.vocab_size)).collect();
                let score = toks.iter().map(|&t| rule.weights[t]).sum::<f64>() / len as f64;
                (toks, Label::Score(score))
            }
            TaskKind::Tag => {
                let mut toks = Vec::with_capacity(len);
                for _ in 0..len {
                    let t = if rng.random_bool(0.3) {
                        *rule.markers.choose(&mut rng).expect("markers")
                    } else {
                        rng.random_range(SPECIALS..spec.vocab_size)
                    };
                    toks.push(t);
                }
                let mut tags = vec![None];
                for (i, &t) in toks.iter().enumerate() {
                    let shifted = i > 0 && rule.markers.contains(&toks[i - 1]);
                    let base = rule.types[t];
                    tags.push(Some(if shifted { (base + 1) % spec.num_classes } else { base }));
                }
                (toks, Label::Tags(tags))
            }
        };
        if !seen.insert(tokens.clone()) {
            continue;
        }
        let mut with_cls = Vec::with_capacity(tokens.len() + 1);
        with_cls.push(CLS);
        with_cls.extend(tokens);
        examples.push(Example { tokens: with_cls, label });
    }
    examples.shuffle(&mut rng);
    let dev = examples.split_off(spec.train_size);
    Ok(TaskData {
        kind: spec.kind,
        num_labels: spec.num_labels(),
        seq_len: spec.seq_len,
        vocab: Vocab::synthetic(spec.vocab_size),
        train: examples,
        dev,
    })
}

/// Shuffled index order for one epoch; a pure function of its inputs.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64));
    idx.shuffle(&mut rng);
    idx
}

/// Pads `examples` into a model batch of length `seq`.
pub fn make_batch(examples: &[&Example], seq: usize) -> ModelResult<Batch> {
    let seqs: Vec<&[usize]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    Batch::from_sequences(&seqs, seq, PAD)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TsvSchema {
    pub kind: TaskKind,
    pub text_columns: usize,
    pub has_header: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsvRow {
    pub text: String,
    pub text2: Option<String>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsvDataset {
    pub rows: Vec<TsvRow>,
    pub label_map: BTreeMap<String, usize>,
}

impl TsvDataset {
    /// Builds a vocabulary over all words in the rows.
    pub fn vocab(&self) -> Vocab {
        let mut words = Vec::new();
        for r in &self.rows {
            words.extend(r.text.split_whitespace().map(str::to_string));
            if let Some(t) = &r.text2 {
                words.extend(t.split_whitespace().map(str::to_string));
            }
        }
        Vocab::from_tokens(words)
    }

    pub fn examples(&self, vocab: &Vocab, seq_len: usize) -> Vec<Example> {
        self.rows
            .iter()
            .map(|r| {
                let mut text = r.text.clone();
                if let Some(t) = &r.text2 {
                    text.push(' ');
                    text.push_str(t);
                }
                let mut tokens = vocab.encode(&text).unwrap_or_else(|_| vec![CLS]);
                tokens.truncate(seq_len);
                let label = match &r.label {
                    Label::Tags(t) => {
                        let mut tags = vec![None];
                        tags.extend(t.iter().copied());
                        tags.truncate(tokens.len());
                        Label::Tags(tags)
                    }
                    other => other.clone(),
                };
                Example { tokens, label }
            })
            .collect()
    }

    /// Row order for one pass, reproducible under `seed`.
    pub fn shuffled(&self, seed: u64) -> Vec<&TsvRow> {
        epoch_order(self.rows.len(), seed, 0).into_iter().map(|i| &self.rows[i]).collect()
    }
}

/// Reads a tab-separated file: text column(s) then a label column. Writes
/// the label map next to it as `<file>.labels`.
pub fn load_tsv(path: &Path, schema: &TsvSchema) -> Result<TsvDataset, DataError> {
    let io = |source| DataError::Io { path: path.to_path_buf(), source };
    let content = fs::read_to_string(path).map_err(io)?;
    let mut rows = Vec::new();
    let mut label_map: BTreeMap<String, usize> = BTreeMap::new();
    let want = schema.text_columns + 1;
    if !(1..=2).contains(&schema.text_columns) {
        return Err(DataError::InvalidSpec("text columns must be 1 or 2".into()));
    }
    for (i, line) in content.lines().enumerate() {
        let lineno = i + 1;
        if (i == 0 && schema.has_header) || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != want {
            return Err(DataError::ParseError { line: lineno, msg: format!("expected {want} columns, found {}", cols.len()) });
        }
        let raw = cols[want - 1].trim();
        let label = match schema.kind {
            TaskKind::Regress => Label::Score(raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                DataError::LabelOutOfSchema { line: lineno, label: raw.to_string(), kind: schema.kind }
            })?),
            TaskKind::Classify => {
                if raw.is_empty() || raw.contains(char::is_whitespace) {
                    return Err(DataError::LabelOutOfSchema { line: lineno, label: raw.to_string(), kind: schema.kind });
                }
                let n = label_map.len();
                Label::Class(*label_map.entry(raw.to_string()).or_insert(n))
            }
            TaskKind::Tag => {
                let tags: Vec<&str> = raw.split_whitespace().collect();
                if tags.len() != cols[0].split_whitespace().count() {
                    return Err(DataError::ParseError { line: lineno, msg: "tag count differs from token count".into() });
                }
                let ids = tags
                    .into_iter()
                    .map(|t| {
                        let n = label_map.len();
                        Some(*label_map.entry(t.to_string()).or_insert(n))
                    })
                    .collect();
                Label::Tags(ids)
            }
        };
        if cols[0].trim().is_empty() {
            return Err(DataError::ParseError { line: lineno, msg: "empty text".into() });
        }
        rows.push(TsvRow {
            text: cols[0].to_string(),
            text2: (schema.text_columns == 2).then(|| cols[1].to_string()),
            label,
        });
    }
    if schema.kind != TaskKind::Regress {
        let sidecar: String = label_map.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let mut p = path.as_os_str().to_owned();
        p.push(".labels");
        fs::write(&p, sidecar).map_err(|source| DataError::Io { path: PathBuf::from(p), source })?;
    }
    Ok(TsvDataset { rows, label_map })
}
