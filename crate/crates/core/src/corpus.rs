//! Annotated corpora in a tab-separated column format.
//!
//! ```text
//! # id: 1
//! Financial    B-C
//! stress       I-C
//! ...
//!
//! ```
//!
//! One `token<TAB>tag` line per token (tabs drawn as spaces above), a blank
//! line after every sentence and an optional `# id: N` line before it. Sentences without an id line are
//! numbered by their position. Output always uses LF and writes the id line.

use std::collections::HashSet;
use std::fmt;
use std::io::{self, BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scheme::{validate_tags, Sentence, Tag, TagSequence};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("sentence ending at line {line}: {message}")]
    Validation { line: usize, message: String },
    #[error("validation split of {requested} sentences out of {total} is not a proper split")]
    TooSmall { requested: usize, total: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A sentence with its gold tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotated {
    pub sentence: Sentence,
    pub tags: TagSequence,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub name: String,
    pub sentences: Vec<Annotated>,
}

impl Corpus {
    pub fn new(name: impl Into<String>) -> Self {
        Corpus { name: name.into(), sentences: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Appends a sentence, checking tag count, BIO well-formedness and id uniqueness.
    pub fn push(&mut self, sentence: Sentence, tags: TagSequence) -> Result<(), String> {
        if tags.len() != sentence.len() {
            return Err(format!("{} tags for {} tokens", tags.len(), sentence.len()));
        }
        let report = validate_tags(&tags);
        if !report.is_valid() {
            return Err(report.to_string());
        }
        if self.sentences.iter().any(|a| a.sentence.id == sentence.id) {
            return Err(format!("duplicate sentence id {}", sentence.id));
        }
        self.sentences.push(Annotated { sentence, tags });
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Annotated> {
        self.sentences.iter()
    }
}

/// Parses a corpus; tags must be present on every token line.
pub fn read_corpus<R: BufRead>(source: R, name: &str) -> Result<Corpus, CorpusError> {
    parse(source, name, true)
}

/// Parses token lines with or without a tag column; missing tags become `O`.
pub fn read_tokens<R: BufRead>(source: R, name: &str) -> Result<Corpus, CorpusError> {
    parse(source, name, false)
}

fn parse<R: BufRead>(source: R, name: &str, require_tags: bool) -> Result<Corpus, CorpusError> {
    let mut corpus = Corpus::new(name);
    let mut pending_id: Option<u32> = None;
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<Tag> = Vec::new();
    let mut seen: HashSet<u32> = HashSet::new();
    let mut last_line = 0;

    let mut flush = |line: usize,
                     pending_id: &mut Option<u32>,
                     tokens: &mut Vec<String>,
                     tags: &mut Vec<Tag>,
                     corpus: &mut Corpus|
     -> Result<(), CorpusError> {
        if tokens.is_empty() {
            return Ok(());
        }
        let id = pending_id.take().unwrap_or(corpus.sentences.len() as u32);
        if !seen.insert(id) {
            return Err(CorpusError::Validation { line, message: format!("duplicate sentence id {id}") });
        }
        let sentence = Sentence::new(id, std::mem::take(tokens))
            .map_err(|e| CorpusError::Validation { line, message: e.to_string() })?;
        let tag_seq = TagSequence(std::mem::take(tags));
        let report = validate_tags(&tag_seq);
        if !report.is_valid() {
            return Err(CorpusError::Validation { line, message: report.to_string() });
        }
        corpus.sentences.push(Annotated { sentence, tags: tag_seq });
        Ok(())
    };

    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        last_line = line_no;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            flush(line_no, &mut pending_id, &mut tokens, &mut tags, &mut corpus)?;
            continue;
        }
        if !line.contains('\t') && line.starts_with('#') {
            if let Some(rest) = line.strip_prefix("# id:") {
                if !tokens.is_empty() {
                    return Err(CorpusError::Parse { line: line_no, message: "id line inside a sentence".into() });
                }
                let id = rest.trim().parse::<u32>().map_err(|_| CorpusError::Parse {
                    line: line_no,
                    message: format!("bad sentence id {:?}", rest.trim()),
                })?;
                pending_id = Some(id);
            }
            continue;
        }
        let mut cols = line.split('\t');
        let token = cols.next().unwrap_or_default();
        let tag = cols.next();
        if cols.next().is_some() {
            return Err(CorpusError::Parse { line: line_no, message: "more than two columns".into() });
        }
        if token.is_empty() {
            return Err(CorpusError::Parse { line: line_no, message: "empty token".into() });
        }
        let tag = match tag {
            Some(t) => t.parse::<Tag>().map_err(|e| CorpusError::Parse { line: line_no, message: e.to_string() })?,
            None if require_tags => {
                return Err(CorpusError::Parse { line: line_no, message: "missing tag column".into() })
            }
            None => Tag::O,
        };
        tokens.push(token.to_string());
        tags.push(tag);
    }
    flush(last_line, &mut pending_id, &mut tokens, &mut tags, &mut corpus)?;
    Ok(corpus)
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> io::Result<()> {
    for a in &corpus.sentences {
        writeln!(out, "# id: {}", a.sentence.id)?;
        for (token, tag) in a.sentence.tokens().iter().zip(a.tags.tags()) {
            writeln!(out, "{token}\t{tag}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn corpus_to_string(corpus: &Corpus) -> String {
    let mut buf = Vec::new();
    write_corpus(corpus, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("tokens are UTF-8")
}

/// Counts of each non-`O` tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TagStats {
    pub begin_cause: usize,
    pub inside_cause: usize,
    pub begin_effect: usize,
    pub inside_effect: usize,
    pub begin_emb: usize,
    pub inside_emb: usize,
}

impl TagStats {
    pub fn sum(&self) -> usize {
        self.begin_cause + self.inside_cause + self.begin_effect + self.inside_effect + self.begin_emb + self.inside_emb
    }

    pub fn rows(&self) -> [(Tag, usize); 6] {
        [
            (Tag::BeginCause, self.begin_cause),
            (Tag::InsideCause, self.inside_cause),
            (Tag::BeginEffect, self.begin_effect),
            (Tag::InsideEffect, self.inside_effect),
            (Tag::BeginEmb, self.begin_emb),
            (Tag::InsideEmb, self.inside_emb),
        ]
    }
}

impl fmt::Display for TagStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "tag\tcount")?;
        for (tag, count) in self.rows() {
            writeln!(f, "{tag}\t{count}")?;
        }
        writeln!(f, "Sum\t{}", self.sum())
    }
}

pub fn corpus_stats(corpus: &Corpus) -> TagStats {
    let mut stats = TagStats::default();
    for tag in corpus.sentences.iter().flat_map(|a| a.tags.tags()) {
        match tag {
            Tag::O => {}
            Tag::BeginCause => stats.begin_cause += 1,
            Tag::InsideCause => stats.inside_cause += 1,
            Tag::BeginEffect => stats.begin_effect += 1,
            Tag::InsideEffect => stats.inside_effect += 1,
            Tag::BeginEmb => stats.begin_emb += 1,
            Tag::InsideEmb => stats.inside_emb += 1,
        }
    }
    stats
}

/// Splits off `round(fraction * n)` randomly chosen sentences as a
/// validation set. Both halves keep the original sentence order.
pub fn split_validation(corpus: &Corpus, fraction: f64, seed: u64) -> Result<(Corpus, Corpus), CorpusError> {
    let total = corpus.len();
    let requested = (fraction * total as f64).round() as usize;
    if !(fraction > 0.0 && fraction < 1.0) || requested == 0 || requested >= total {
        return Err(CorpusError::TooSmall { requested, total });
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_validation = vec![false; total];
    for &i in &order[..requested] {
        in_validation[i] = true;
    }
    let mut train = Corpus::new(format!("{}-train", corpus.name));
    let mut validation = Corpus::new(format!("{}-validation", corpus.name));
    for (a, &val) in corpus.sentences.iter().zip(&in_validation) {
        if val {
            validation.sentences.push(a.clone());
        } else {
            train.sentences.push(a.clone());
        }
    }
    Ok((train, validation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::scheme::encode_triplets;
    use proptest::prelude::*;

    fn fixture_corpus() -> Corpus {
        let mut c = Corpus::new("fixtures");
        for (s, t) in fixtures::all() {
            let tags = encode_triplets(&s, &t).unwrap();
            c.push(s, tags).unwrap();
        }
        c
    }

    #[test]
    fn reads_a_two_token_record() {
        let c = read_corpus("Financial\tB-C\nstress\tI-C\n\n".as_bytes(), "t").unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.sentences[0].sentence.tokens(), ["Financial", "stress"]);
        assert_eq!(c.sentences[0].sentence.id, 0);
    }

    #[test]
    fn fixture_bytes_round_trip() {
        let (s, t) = fixtures::embedded();
        let mut c = Corpus::new("fig");
        let tags = encode_triplets(&s, &t).unwrap();
        c.push(s, tags).unwrap();
        let text = corpus_to_string(&c);
        assert!(text.starts_with("# id: 3\nMost\tO\n"));
        let back = read_corpus(text.as_bytes(), "fig").unwrap();
        assert_eq!(back, c);
        assert_eq!(corpus_to_string(&back), text);
    }

    #[test]
    fn parse_errors_name_lines() {
        let err = read_corpus("a\tO\nb\tB-X\n".as_bytes(), "t").unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 2, .. }), "{err}");
        let err = read_corpus("a\tO\tO\n".as_bytes(), "t").unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 1, .. }));
        let err = read_corpus("a\n".as_bytes(), "t").unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 1, .. }));
        let err = read_corpus("a\tO\nb\tI-C\n\n".as_bytes(), "t").unwrap_err();
        assert!(matches!(err, CorpusError::Validation { line: 3, .. }), "{err}");
        let err = read_corpus("# id: 4\na\tO\n\n# id: 4\nb\tO\n".as_bytes(), "t").unwrap_err();
        assert!(matches!(err, CorpusError::Validation { .. }));
    }

    #[test]
    fn tolerates_crlf_and_missing_final_blank() {
        let c = read_corpus("# id: 9\r\nx\tB-E\r\ny\tO".as_bytes(), "t").unwrap();
        assert_eq!(c.sentences[0].sentence.id, 9);
        assert_eq!(c.sentences[0].tags, TagSequence(vec![Tag::BeginEffect, Tag::O]));
    }

    #[test]
    fn token_only_input() {
        let c = read_tokens("a\nb\tB-C\n\nc\n".as_bytes(), "t").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.sentences[0].tags.tags(), [Tag::O, Tag::BeginCause]);
    }

    #[test]
    fn stats_count_tags() {
        let stats = corpus_stats(&fixture_corpus());
        assert_eq!(stats.begin_emb, 2);
        assert_eq!(stats.inside_emb, 3);
        assert_eq!(corpus_stats(&Corpus::new("empty")), TagStats::default());
        assert_eq!(corpus_stats(&Corpus::new("empty")).sum(), 0);
    }

    #[test]
    fn split_sizes() {
        let mut c = Corpus::new("big");
        for i in 0..4450u32 {
            c.push(Sentence::from_text(i, "w").unwrap(), TagSequence::all_outside(1)).unwrap();
        }
        let (train, val) = split_validation(&c, 0.1, 3).unwrap();
        assert_eq!(val.len(), 445);
        assert_eq!(train.len(), 4005);
        let (train2, val2) = split_validation(&c, 0.1, 3).unwrap();
        assert_eq!((train, val), (train2, val2));

        let two = Corpus { name: "two".into(), sentences: c.sentences[..2].to_vec() };
        let (a, b) = split_validation(&two, 0.5, 0).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        assert!(matches!(split_validation(&two, 0.1, 0), Err(CorpusError::TooSmall { .. })));
    }

    fn arb_corpus() -> impl Strategy<Value = Corpus> {
        let sentence = prop::collection::vec(("[a-zé.,]{1,6}", 0usize..7), 1..12);
        prop::collection::vec(sentence, 0..8).prop_map(|sents| {
            let mut c = Corpus::new("arb");
            for (i, toks) in sents.into_iter().enumerate() {
                let tokens: Vec<String> = toks.iter().map(|(t, _)| t.clone()).collect();
                let raw: TagSequence = toks.iter().map(|&(_, k)| Tag::from_index(k).unwrap()).collect();
                let tags = crate::scheme::repair_tags(&raw);
                c.push(Sentence::new(i as u32 * 3, tokens).unwrap(), tags).unwrap();
            }
            c
        })
    }

    proptest! {
        #[test]
        fn serialization_round_trips(c in arb_corpus()) {
            let text = corpus_to_string(&c);
            let back = read_corpus(text.as_bytes(), "arb").unwrap();
            prop_assert_eq!(&back, &c);
        }

        #[test]
        fn split_partitions(c in arb_corpus(), seed in any::<u64>(), frac in 0.05f64..0.95) {
            if let Ok((train, val)) = split_validation(&c, frac, seed) {
                prop_assert_eq!(train.len() + val.len(), c.len());
                prop_assert_eq!(val.len(), (frac * c.len() as f64).round() as usize);
                let mut ids: Vec<u32> = train.iter().chain(val.iter()).map(|a| a.sentence.id).collect();
                ids.sort();
                let mut orig: Vec<u32> = c.iter().map(|a| a.sentence.id).collect();
                orig.sort();
                prop_assert_eq!(ids, orig);
            }
        }

        #[test]
        fn stats_sum_matches_non_outside(c in arb_corpus()) {
            let non_o = c.iter().flat_map(|a| a.tags.tags()).filter(|t| **t != Tag::O).count();
            prop_assert_eq!(corpus_stats(&c).sum(), non_o);
        }
    }
}
