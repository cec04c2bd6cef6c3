//! Token input vectors.
//!
//! Three sources feed the tagger: a fixed word table read from a text file,
//! a trainable character table, and contextual vectors precomputed offline
//! and stored per sentence in a small binary file.
//!
//! Contextual store layout (all integers little-endian `u32`):
//!
//! ```text
//! "CTXE" version=1 dim
//! repeated until EOF:
//!     sentence_id n_tokens  n_tokens * dim f32 (little-endian)
//! optional trailer:
//!     0xFFFFFFFF name_len  name_len bytes of UTF-8 (embedder name)
//! ```

use std::collections::{BTreeSet, HashMap};
use std::io::{self, BufRead, Read, Write};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::Corpus;
use crate::scheme::Sentence;

pub const CTX_MAGIC: &[u8; 4] = b"CTXE";
pub const CTX_VERSION: u32 = 1;
const TRAILER_MARK: u32 = u32::MAX;

pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: expected {expected} values, found {found}")]
    DimMismatch { line: usize, expected: usize, found: usize },
    #[error("contextual store: {0}")]
    Format(String),
    #[error("contextual store has no sentence {0}")]
    MissingSentence(u32),
    #[error("contextual store has {found} vectors for sentence {sentence}, which has {expected} tokens")]
    MissingToken { sentence: u32, expected: usize, found: usize },
    #[error("contextual store lists sentence {0} twice")]
    DuplicateSentence(u32),
    #[error("contextual dimension {found} does not match configured {expected}")]
    ContextDim { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Vector used for keys missing from a table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnkPolicy {
    #[default]
    Zeros,
    Mean,
}

/// String-keyed vectors of a common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    keys: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Array2<f64>,
    unk: Array1<f64>,
}

impl EmbeddingTable {
    pub fn from_rows(dim: usize, rows: Vec<(String, Vec<f64>)>, policy: UnkPolicy) -> Result<Self, EmbeddingError> {
        let mut keys = Vec::with_capacity(rows.len());
        let mut index = HashMap::with_capacity(rows.len());
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for (i, (key, v)) in rows.into_iter().enumerate() {
            if v.len() != dim {
                return Err(EmbeddingError::DimMismatch { line: i + 1, expected: dim, found: v.len() });
            }
            match index.get(&key) {
                Some(&row) => {
                    log::warn!("duplicate embedding key {key:?}; keeping the last vector");
                    flat[row * dim..(row + 1) * dim].copy_from_slice(&v);
                }
                None => {
                    index.insert(key.clone(), keys.len());
                    keys.push(key);
                    flat.extend_from_slice(&v);
                }
            }
        }
        let vectors = Array2::from_shape_vec((keys.len(), dim), flat).expect("row lengths checked");
        let unk = match policy {
            UnkPolicy::Mean if !keys.is_empty() => vectors.mean_axis(Axis(0)).expect("non-empty"),
            _ => Array1::zeros(dim),
        };
        Ok(EmbeddingTable { dim, keys, index, vectors, unk })
    }

    /// A table with no entries; every lookup yields the zero vector.
    pub fn empty(dim: usize) -> Self {
        EmbeddingTable::from_rows(dim, Vec::new(), UnkPolicy::Zeros).expect("no rows")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    /// Exact key first, then its lowercase form, then the unknown vector.
    pub fn lookup(&self, key: &str) -> ArrayView1<'_, f64> {
        let row = self.index.get(key).or_else(|| self.index.get(&key.to_lowercase()));
        match row {
            Some(&r) => self.vectors.row(r),
            None => self.unk.view(),
        }
    }

    pub fn unk(&self) -> ArrayView1<'_, f64> {
        self.unk.view()
    }
}

/// Reads `vocab_size dim` followed by one `word v1 ... v_dim` line per word.
pub fn load_word_table<R: BufRead>(source: R, policy: UnkPolicy) -> Result<EmbeddingTable, EmbeddingError> {
    let mut lines = source.lines();
    let header = lines.next().ok_or(EmbeddingError::Parse { line: 1, message: "empty file".into() })??;
    let mut fields = header.split_whitespace();
    let parse_usize = |s: Option<&str>, what: &str| {
        s.and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| EmbeddingError::Parse { line: 1, message: format!("header needs {what}") })
    };
    let vocab = parse_usize(fields.next(), "vocab_size")?;
    let dim = parse_usize(fields.next(), "dim")?;

    let mut rows = Vec::with_capacity(vocab);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let word = parts.next().unwrap_or_default().to_string();
        let values = parts
            .filter(|p| !p.is_empty())
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| EmbeddingError::Parse { line: line_no, message: format!("bad number {p:?}") })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != dim {
            return Err(EmbeddingError::DimMismatch { line: line_no, expected: dim, found: values.len() });
        }
        rows.push((word, values));
    }
    if rows.len() != vocab {
        log::warn!("word table header announces {vocab} words, found {}", rows.len());
    }
    EmbeddingTable::from_rows(dim, rows, policy)
}

pub fn write_word_table<W: Write>(table: &EmbeddingTable, mut out: W) -> io::Result<()> {
    writeln!(out, "{} {}", table.len(), table.dim())?;
    for (key, row) in table.keys.iter().zip(table.vectors.rows()) {
        write!(out, "{key}")?;
        for v in row {
            write!(out, " {v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Characters of every token in `corpus`, sorted.
pub fn alphabet(corpus: &Corpus) -> Vec<char> {
    corpus
        .iter()
        .flat_map(|a| a.sentence.tokens().iter().flat_map(|t| t.chars()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Character-to-row mapping for the character table. Row 0 is padding,
/// row 1 stands for characters outside the alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    alphabet: Vec<char>,
    index: HashMap<char, usize>,
}

impl CharVocab {
    pub fn new(alphabet: Vec<char>) -> Self {
        let mut chars = Vec::with_capacity(alphabet.len());
        let mut index = HashMap::with_capacity(alphabet.len());
        for c in alphabet {
            if let std::collections::hash_map::Entry::Vacant(slot) = index.entry(c) {
                slot.insert(chars.len() + 2);
                chars.push(c);
            }
        }
        CharVocab { alphabet: chars, index }
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    /// Number of table rows, including padding and unknown.
    pub fn rows(&self) -> usize {
        self.alphabet.len() + 2
    }

    pub fn index(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK_INDEX)
    }
}

/// Character table for `vocab`: padding row all zeros, other components
/// uniform in ±sqrt(3 / dim).
pub fn init_char_table(vocab: &CharVocab, dim: usize, seed: u64) -> Array2<f64> {
    assert!(dim > 0, "character dimension must be positive");
    let bound = (3.0 / dim as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = Array2::from_shape_simple_fn((vocab.rows(), dim), || dist.sample(&mut rng));
    table.row_mut(PAD_INDEX).fill(0.0);
    table
}

/// Precomputed per-token vectors keyed by sentence id.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualStore {
    dim: usize,
    order: Vec<u32>,
    records: HashMap<u32, Array2<f32>>,
    pub embedder: Option<String>,
}

impl ContextualStore {
    pub fn new(dim: usize) -> Self {
        ContextualStore { dim, order: Vec::new(), records: HashMap::new(), embedder: None }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn insert(&mut self, sentence_id: u32, vectors: Array2<f32>) -> Result<(), EmbeddingError> {
        if vectors.ncols() != self.dim {
            return Err(EmbeddingError::ContextDim { expected: self.dim, found: vectors.ncols() });
        }
        if self.records.contains_key(&sentence_id) {
            return Err(EmbeddingError::DuplicateSentence(sentence_id));
        }
        self.order.push(sentence_id);
        self.records.insert(sentence_id, vectors);
        Ok(())
    }

    pub fn sentence(&self, sentence_id: u32) -> Result<&Array2<f32>, EmbeddingError> {
        self.records.get(&sentence_id).ok_or(EmbeddingError::MissingSentence(sentence_id))
    }

    pub fn get(&self, sentence_id: u32, token: usize) -> Result<ArrayView1<'_, f32>, EmbeddingError> {
        let m = self.sentence(sentence_id)?;
        if token >= m.nrows() {
            return Err(EmbeddingError::MissingToken { sentence: sentence_id, expected: token + 1, found: m.nrows() });
        }
        Ok(m.row(token))
    }

    pub fn sentence_ids(&self) -> &[u32] {
        &self.order
    }
}

fn take_u32(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32, EmbeddingError> {
    let end = *pos + 4;
    let chunk =
        bytes.get(*pos..end).ok_or_else(|| EmbeddingError::Format(format!("truncated {what} at byte {}", *pos)))?;
    *pos = end;
    Ok(u32::from_le_bytes(chunk.try_into().expect("4 bytes")))
}

pub fn load_contextual<R: Read>(mut source: R) -> Result<ContextualStore, EmbeddingError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    if bytes.get(..4) != Some(CTX_MAGIC.as_slice()) {
        return Err(EmbeddingError::Format("missing CTXE magic".into()));
    }
    let mut pos = 4;
    let version = take_u32(&bytes, &mut pos, "version")?;
    if version != CTX_VERSION {
        return Err(EmbeddingError::Format(format!("unsupported version {version}")));
    }
    let dim = take_u32(&bytes, &mut pos, "dim")? as usize;
    if dim == 0 {
        return Err(EmbeddingError::Format("dimension is zero".into()));
    }
    let mut store = ContextualStore::new(dim);
    while pos < bytes.len() {
        let sentence_id = take_u32(&bytes, &mut pos, "sentence id")?;
        if sentence_id == TRAILER_MARK {
            let len = take_u32(&bytes, &mut pos, "trailer length")? as usize;
            let name = bytes.get(pos..pos + len).ok_or_else(|| EmbeddingError::Format("truncated trailer".into()))?;
            store.embedder = Some(
                String::from_utf8(name.to_vec()).map_err(|_| EmbeddingError::Format("trailer is not UTF-8".into()))?,
            );
            pos += len;
            if pos != bytes.len() {
                return Err(EmbeddingError::Format("data after trailer".into()));
            }
            break;
        }
        let n = take_u32(&bytes, &mut pos, "token count")? as usize;
        let len = n * dim * 4;
        let data = bytes
            .get(pos..pos + len)
            .ok_or_else(|| EmbeddingError::Format(format!("truncated vectors for sentence {sentence_id}")))?;
        pos += len;
        let values: Vec<f32> =
            data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let m = Array2::from_shape_vec((n, dim), values).expect("length is n * dim");
        store.insert(sentence_id, m)?;
    }
    Ok(store)
}

pub fn write_contextual<W: Write>(store: &ContextualStore, mut out: W) -> io::Result<()> {
    out.write_all(CTX_MAGIC)?;
    out.write_all(&CTX_VERSION.to_le_bytes())?;
    out.write_all(&(store.dim as u32).to_le_bytes())?;
    for id in &store.order {
        let m = &store.records[id];
        out.write_all(&id.to_le_bytes())?;
        out.write_all(&(m.nrows() as u32).to_le_bytes())?;
        for v in m.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    if let Some(name) = &store.embedder {
        out.write_all(&TRAILER_MARK.to_le_bytes())?;
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
    }
    Ok(())
}

/// Per-token inputs for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBundle {
    /// n × word dim; fixed during training.
    pub words: Array2<f64>,
    /// n × contextual dim; zeros when no store is supplied.
    pub context: Array2<f64>,
    /// Character indices per token, right-padded with [`PAD_INDEX`] to the
    /// longest token of the sentence.
    pub chars: Vec<Vec<usize>>,
    /// Character count of each token.
    pub char_lens: Vec<usize>,
}

impl InputBundle {
    pub fn len(&self) -> usize {
        self.char_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.char_lens.is_empty()
    }
}

pub fn assemble_inputs(
    sentence: &Sentence,
    words: &EmbeddingTable,
    chars: &CharVocab,
    context: Option<&ContextualStore>,
    context_dim: usize,
) -> Result<InputBundle, EmbeddingError> {
    let n = sentence.len();
    let mut word_rows = Array2::zeros((n, words.dim()));
    for (t, token) in sentence.tokens().iter().enumerate() {
        word_rows.row_mut(t).assign(&words.lookup(token));
    }

    let mut ctx_rows = Array2::zeros((n, context_dim));
    if let Some(store) = context {
        if store.dim() != context_dim {
            return Err(EmbeddingError::ContextDim { expected: context_dim, found: store.dim() });
        }
        let m = store.sentence(sentence.id)?;
        if m.nrows() != n {
            return Err(EmbeddingError::MissingToken { sentence: sentence.id, expected: n, found: m.nrows() });
        }
        ctx_rows.zip_mut_with(m, |dst, &src| *dst = src as f64);
    }

    let char_lens: Vec<usize> = sentence.tokens().iter().map(|t| t.chars().count()).collect();
    let width = char_lens.iter().copied().max().unwrap_or(0);
    let char_rows = sentence
        .tokens()
        .iter()
        .map(|t| {
            let mut row: Vec<usize> = t.chars().map(|c| chars.index(c)).collect();
            row.resize(width, PAD_INDEX);
            row
        })
        .collect();

    Ok(InputBundle { words: word_rows, context: ctx_rows, chars: char_rows, char_lens })
}
