//! Dataset ingestion, tokenization, few-shot subsampling, and a synthetic
//! intent corpus.
//!
//! Files are jsonl (one `{"text": ..., "label": ...}` object per line) or
//! RFC-4180 csv with a `text,label` header, both UTF-8. Tokenization is
//! character-level by default — one token per Unicode scalar, which handles
//! CJK text without a segmenter — with a whitespace mode for Latin-script
//! corpora. Label ids follow first appearance in the file, so loading is
//! fully deterministic.
//!
//! The synthetic generator stands in for real intent corpora at desk scale:
//! each class owns three signature characters, examples are short sequences
//! mixing signature repeats with a shared filler alphabet, and a noise rate
//! swaps tokens for random fillers. At zero noise the classes are separable
//! by construction.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("dataset {0} holds no examples")]
    EmptyDataset(String),
    #[error("dataset {path} has {classes} class(es); at least 2 required")]
    TooFewClasses { path: String, classes: usize },
    #[error("duplicate column `{0}` in csv header")]
    DuplicateHeader(String),
    #[error("csv header must name `text` and `label` columns, got {0:?}")]
    BadHeader(Vec<String>),
    #[error("csv write failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("synthetic corpus needs at least 2 classes, got {0}")]
    TooFewSynthClasses(usize),
}

/// On-disk representation shared by both file formats.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Record {
    text: String,
    label: String,
}

/// One labeled text sample. `text` is non-empty after trimming.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub text: String,
    pub label: String,
}

/// A set of examples plus the class-name table; class ids are assigned by
/// first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    examples: Vec<Example>,
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabeledDataset {
    pub fn from_examples(examples: Vec<Example>) -> Self {
        let mut labels = Vec::new();
        let mut index = HashMap::new();
        for ex in &examples {
            if !index.contains_key(&ex.label) {
                index.insert(ex.label.clone(), labels.len());
                labels.push(ex.label.clone());
            }
        }
        LabeledDataset { examples, labels, index }
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Class names in id order.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.labels.len()
    }

    pub fn label_id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    #[default]
    Jsonl,
    Csv,
}

impl DataFormat {
    /// Guesses from a file extension; defaults to jsonl.
    pub fn from_path(path: &Path) -> DataFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => DataFormat::Csv,
            _ => DataFormat::Jsonl,
        }
    }
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataFormat::Jsonl => "jsonl",
            DataFormat::Csv => "csv",
        })
    }
}

fn validate_example(text: &str, label: &str, line: usize) -> Result<Example, DataError> {
    if text.trim().is_empty() {
        return Err(DataError::MalformedLine {
            line,
            message: "`text` is empty after trimming".into(),
        });
    }
    Ok(Example { text: text.to_string(), label: label.to_string() })
}

fn load_jsonl(path: &Path) -> Result<Vec<Example>, DataError> {
    let raw = std::fs::read_to_string(path)?;
    let mut examples = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(line).map_err(|e| DataError::MalformedLine {
                line: idx + 1,
                message: e.to_string(),
            })?;
        examples.push(validate_example(&record.text, &record.label, idx + 1)?);
    }
    Ok(examples)
}

fn load_csv(path: &Path) -> Result<Vec<Example>, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut text_col = None;
    let mut label_col = None;
    for (idx, name) in headers.iter().enumerate() {
        match name.as_str() {
            "text" if text_col.is_some() => return Err(DataError::DuplicateHeader("text".into())),
            "text" => text_col = Some(idx),
            "label" if label_col.is_some() => {
                return Err(DataError::DuplicateHeader("label".into()))
            }
            "label" => label_col = Some(idx),
            _ => {}
        }
    }
    let (text_col, label_col) = match (text_col, label_col) {
        (Some(t), Some(l)) => (t, l),
        _ => return Err(DataError::BadHeader(headers)),
    };
    let mut examples = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let line = idx + 2; // header occupies line 1
        let row = row.map_err(|e| DataError::MalformedLine { line, message: e.to_string() })?;
        let text = row.get(text_col).ok_or_else(|| DataError::MalformedLine {
            line,
            message: "missing `text` column".into(),
        })?;
        let label = row.get(label_col).ok_or_else(|| DataError::MalformedLine {
            line,
            message: "missing `label` column".into(),
        })?;
        examples.push(validate_example(text, label, line)?);
    }
    Ok(examples)
}

/// Loads a dataset, assigning class ids by first appearance. Rejects empty
/// files, single-class files, and malformed rows (reported with their line
/// numbers).
pub fn load_dataset(path: &Path, format: DataFormat) -> Result<LabeledDataset, DataError> {
    let examples = match format {
        DataFormat::Jsonl => load_jsonl(path)?,
        DataFormat::Csv => load_csv(path)?,
    };
    let shown = path.display().to_string();
    if examples.is_empty() {
        return Err(DataError::EmptyDataset(shown));
    }
    let ds = LabeledDataset::from_examples(examples);
    if ds.class_count() < 2 {
        return Err(DataError::TooFewClasses { path: shown, classes: ds.class_count() });
    }
    Ok(ds)
}

/// Writes the dataset in the given format; `load_dataset` reads it back to
/// identical (text, label) pairs.
pub fn save_dataset(
    ds: &LabeledDataset,
    path: &Path,
    format: DataFormat,
) -> Result<(), DataError> {
    match format {
        DataFormat::Jsonl => {
            let mut out = String::new();
            for ex in ds.examples() {
                let record = Record { text: ex.text.clone(), label: ex.label.clone() };
                out.push_str(&serde_json::to_string(&record).expect("serializable record"));
                out.push('\n');
            }
            std::fs::write(path, out)?;
        }
        DataFormat::Csv => {
            let mut writer = csv::Writer::from_path(path)?;
            writer.write_record(["text", "label"])?;
            for ex in ds.examples() {
                writer.write_record([&ex.text, &ex.label])?;
            }
            writer.flush()?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Vocabulary and encoding
// ---------------------------------------------------------------------------

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenMode {
    /// One token per Unicode scalar; suits CJK text.
    #[default]
    Char,
    /// Split on runs of whitespace.
    Whitespace,
}

fn tokenize(text: &str, mode: TokenMode) -> Vec<String> {
    match mode {
        TokenMode::Char => text.chars().map(String::from).collect(),
        TokenMode::Whitespace => text.split_whitespace().map(String::from).collect(),
    }
}

/// Token table with dense ids; 0 is PAD, 1 is UNK, the rest follow first
/// appearance in the dataset (frequency threshold 1: everything seen is
/// kept).
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    mode: TokenMode,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    /// Token ids for a text; unseen tokens map to UNK.
    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        tokenize(text, self.mode).iter().map(|t| self.id_of(t)).collect()
    }

    /// Inverse of [`Vocab::encode_text`] for known ids; whitespace tokens are
    /// rejoined with single spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        let parts: Vec<&str> = ids.iter().map(|&id| self.tokens[id].as_str()).collect();
        match self.mode {
            TokenMode::Char => parts.concat(),
            TokenMode::Whitespace => parts.join(" "),
        }
    }
}

pub fn build_vocab(ds: &LabeledDataset, mode: TokenMode) -> Vocab {
    let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
    let mut index = HashMap::new();
    index.insert(tokens[0].clone(), PAD_ID);
    index.insert(tokens[1].clone(), UNK_ID);
    for ex in ds.examples() {
        for token in tokenize(&ex.text, mode) {
            if !index.contains_key(&token) {
                index.insert(token.clone(), tokens.len());
                tokens.push(token);
            }
        }
    }
    Vocab { mode, tokens, index }
}

/// Fixed-length encoded samples: token-id rows padded to `max_len`, true
/// lengths, and integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub max_len: usize,
    pub classes: usize,
    pub tokens: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn one_hot(&self, index: usize) -> Vec<f64> {
        let mut y = vec![0.0; self.classes];
        y[self.labels[index]] = 1.0;
        y
    }
}

/// Truncates to `max_len` tokens, pads with PAD, records true lengths and
/// class ids. `class_labels` supplies the id table (normally the training
/// set's own), so train and test encode consistently.
pub fn encode(
    ds: &LabeledDataset,
    vocab: &Vocab,
    max_len: usize,
    class_labels: &LabeledDataset,
) -> EncodedDataset {
    assert!(max_len >= 1, "max_len must be positive");
    let mut tokens = Vec::with_capacity(ds.len());
    let mut lengths = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    for ex in ds.examples() {
        let mut ids = vocab.encode_text(&ex.text);
        ids.truncate(max_len);
        let length = ids.len().max(1);
        ids.resize(max_len, PAD_ID);
        tokens.push(ids);
        lengths.push(length);
        // Labels unseen in the reference table map to class 0; evaluation
        // then counts them as ordinary mistakes.
        labels.push(class_labels.label_id(&ex.label).unwrap_or(0));
    }
    EncodedDataset { max_len, classes: class_labels.class_count(), tokens, lengths, labels }
}

// ---------------------------------------------------------------------------
// Few-shot sampling
// ---------------------------------------------------------------------------

/// A class whose population fell short of the requested per-class count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShortClass {
    pub label: String,
    pub available: usize,
}

#[derive(Debug, Clone)]
pub struct FewshotOutcome {
    pub dataset: LabeledDataset,
    /// Classes that had fewer than the requested examples and were taken
    /// whole; callers surface these as warnings.
    pub short_classes: Vec<ShortClass>,
}

/// Uniform without-replacement sample of `n_per_class` examples per class,
/// stable under the seed. Classes with fewer examples contribute everything
/// they have and are reported in `short_classes`.
pub fn fewshot_sample(ds: &LabeledDataset, n_per_class: usize, rng: &mut Rng) -> FewshotOutcome {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count()];
    for (idx, ex) in ds.examples().iter().enumerate() {
        per_class[ds.label_id(&ex.label).expect("label indexed at construction")].push(idx);
    }
    let mut chosen = Vec::new();
    let mut short_classes = Vec::new();
    for (class, mut indices) in per_class.into_iter().enumerate() {
        if indices.len() <= n_per_class {
            if indices.len() < n_per_class {
                short_classes
                    .push(ShortClass { label: ds.labels()[class].clone(), available: indices.len() });
            }
            chosen.extend(indices);
            continue;
        }
        // Partial Fisher–Yates: the first n slots end up a uniform subset.
        for slot in 0..n_per_class {
            let other = slot + rng.below(indices.len() - slot);
            indices.swap(slot, other);
        }
        chosen.extend_from_slice(&indices[..n_per_class]);
    }
    chosen.sort_unstable(); // corpus order, independent of class layout
    let examples = chosen.iter().map(|&i| ds.examples()[i].clone()).collect();
    FewshotOutcome { dataset: LabeledDataset::from_examples(examples), short_classes }
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// Shape of a generated corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    /// Fraction of tokens independently replaced by random fillers.
    pub noise: f64,
}

const FILLER_POOL: usize = 24;
const SIGNATURES_PER_CLASS: usize = 3;

fn synth_char(offset: usize) -> char {
    // CJK Unified Ideographs give us thousands of distinct single-scalar
    // tokens, matching the char-level tokenizer's natural habitat.
    char::from_u32(0x4E00 + offset as u32).expect("offset stays inside the CJK block")
}

fn class_signatures(class: usize) -> [char; SIGNATURES_PER_CLASS] {
    [
        synth_char(class * SIGNATURES_PER_CLASS),
        synth_char(class * SIGNATURES_PER_CLASS + 1),
        synth_char(class * SIGNATURES_PER_CLASS + 2),
    ]
}

fn filler_alphabet(classes: usize) -> Vec<char> {
    (0..FILLER_POOL).map(|i| synth_char(classes * SIGNATURES_PER_CLASS + i)).collect()
}

fn synth_example(
    signatures: &[char; SIGNATURES_PER_CLASS],
    fillers: &[char],
    noise: f64,
    force_full_signature: bool,
    rng: &mut Rng,
) -> String {
    let length = 6 + rng.below(7); // 6..=12 tokens
    let keep = if force_full_signature { SIGNATURES_PER_CLASS } else { 2 + rng.below(2) };
    let mut chosen = *signatures;
    rng.shuffle(&mut chosen);
    let chosen = &chosen[..keep];
    let mut tokens: Vec<char> = chosen.to_vec();
    // At least one filler, then a half-and-half mix of signature repeats and
    // fillers up to the drawn length.
    tokens.push(fillers[rng.below(fillers.len())]);
    while tokens.len() < length {
        if rng.next_f64() < 0.5 {
            tokens.push(chosen[rng.below(keep)]);
        } else {
            tokens.push(fillers[rng.below(fillers.len())]);
        }
    }
    rng.shuffle(&mut tokens);
    for t in &mut tokens {
        if rng.next_f64() < noise {
            *t = fillers[rng.below(fillers.len())];
        }
    }
    tokens.into_iter().collect()
}

/// Generates a seeded train/test pair. Every class holds exactly
/// `per_class_train` / `per_class_test` examples; class `c` is labeled
/// `intent-c`. The first training example of each class always contains the
/// full three-signature set, anchoring the class at zero noise.
pub fn generate_synthetic(
    spec: SynthSpec,
    rng: &mut Rng,
) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    if spec.classes < 2 {
        return Err(DataError::TooFewSynthClasses(spec.classes));
    }
    let fillers = filler_alphabet(spec.classes);
    let mut splits = Vec::with_capacity(2);
    for (per_class, is_train) in [(spec.per_class_train, true), (spec.per_class_test, false)] {
        let mut examples = Vec::with_capacity(spec.classes * per_class);
        for class in 0..spec.classes {
            let signatures = class_signatures(class);
            let label = format!("intent-{class}");
            for slot in 0..per_class {
                let text = synth_example(
                    &signatures,
                    &fillers,
                    spec.noise,
                    is_train && slot == 0,
                    rng,
                );
                examples.push(Example { text, label: label.clone() });
            }
        }
        splits.push(LabeledDataset::from_examples(examples));
    }
    let test = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok((train, test))
}
