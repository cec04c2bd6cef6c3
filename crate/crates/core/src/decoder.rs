//! Tag sequence to causal triplets.
//!
//! Spans are read off the tag sequence and given an out-degree (may act as a
//! cause) and an in-degree (may act as an effect). Every (cause-capable,
//! effect-capable) pair of distinct spans is a candidate. Simple sentences
//! keep every candidate. Otherwise combinations of candidates are searched
//! from the smallest size that can realise all degrees upward; at the first
//! size where some combination reproduces the degrees and respects the
//! coordination constraints, the one with the smallest summed token distance
//! wins.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::scheme::{
    classify_causality, extract_spans, repair_tags, CausalSpan, CausalTriplet, CausalityClass, SchemeError, Sentence,
    TagSequence,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error("{spans} spans exceed the decoder limit of {limit}")]
    TooManySpans { spans: usize, limit: usize },
    #[error("combination search exceeded {limit} combinations")]
    CombinatorialBlowup { limit: u64 },
}

/// Out- and in-degree of one span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegreeRecord {
    pub out_degree: u8,
    pub in_degree: u8,
}

/// Indices into the span list: `cause` acts on `effect`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Candidate {
    pub cause: usize,
    pub effect: usize,
}

impl Candidate {
    pub fn new(cause: usize, effect: usize) -> Self {
        Candidate { cause, effect }
    }
}

/// Settings for [`tag2triplet`].
#[derive(Debug, Clone)]
pub struct DecoderConfig {
    /// Connectives; multi-word entries are matched token by token.
    pub coordinators: Vec<Vec<String>>,
    /// Tokens allowed between coordinated spans besides connectives.
    pub determiners: Vec<String>,
    pub max_spans: usize,
    pub max_combinations: u64,
    /// Rewrite orphan `I-` tags to `O` before decoding instead of failing.
    pub repair: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            coordinators: [",", "and", "or", "as well as"]
                .iter()
                .map(|c| c.split_whitespace().map(str::to_string).collect())
                .collect(),
            determiners: ["the", "a", "an"].iter().map(|d| d.to_string()).collect(),
            max_spans: 20,
            max_combinations: 1_000_000,
            repair: false,
        }
    }
}

impl DecoderConfig {
    /// True iff `gap` is a non-empty run of connectives and determiners with at
    /// least one connective.
    pub fn is_coordination(&self, gap: &[String]) -> bool {
        let mut i = 0;
        let mut connectives = 0;
        'outer: while i < gap.len() {
            let mut best = 0;
            for entry in &self.coordinators {
                let n = entry.len();
                if n > best
                    && i + n <= gap.len()
                    && entry.iter().zip(&gap[i..i + n]).all(|(e, g)| e.eq_ignore_ascii_case(g))
                {
                    best = n;
                }
            }
            if best > 0 {
                connectives += 1;
                i += best;
                continue 'outer;
            }
            if self.determiners.iter().any(|d| d.eq_ignore_ascii_case(&gap[i])) {
                i += 1;
                continue;
            }
            return false;
        }
        connectives > 0
    }
}

pub fn count_degrees(spans: &[CausalSpan]) -> Vec<DegreeRecord> {
    spans
        .iter()
        .map(|s| {
            let (out_degree, in_degree) = s.role.degrees();
            DegreeRecord { out_degree, in_degree }
        })
        .collect()
}

/// All pairs `(i, j)`, `i != j`, where span `i` can be a cause and span `j`
/// an effect, ordered by `i` then `j`.
pub fn candidate_pairs(spans: &[CausalSpan]) -> Vec<Candidate> {
    let degrees = count_degrees(spans);
    let mut out = Vec::new();
    for (i, di) in degrees.iter().enumerate() {
        if di.out_degree == 0 {
            continue;
        }
        for (j, dj) in degrees.iter().enumerate() {
            if i != j && dj.in_degree > 0 {
                out.push(Candidate::new(i, j));
            }
        }
    }
    out
}

/// True iff the out-/in-usage vectors realised by `comb` equal `degrees`.
///
/// Usage is recorded as 0 or 1: a span used as a cause by two candidates
/// still has out-usage 1.
pub fn check_degree(comb: &[Candidate], degrees: &[DegreeRecord]) -> bool {
    let mut out_used = vec![0u8; degrees.len()];
    let mut in_used = vec![0u8; degrees.len()];
    for c in comb {
        match (out_used.get_mut(c.cause), in_used.get_mut(c.effect)) {
            (Some(o), Some(i)) => {
                *o = 1;
                *i = 1;
            }
            _ => return false,
        }
    }
    degrees.iter().zip(out_used.iter().zip(&in_used)).all(|(d, (&o, &i))| d.out_degree == o && d.in_degree == i)
}

/// Pairs of neighbouring same-role spans joined only by connectives.
pub fn coordinated_pairs(spans: &[CausalSpan], sentence: &Sentence, config: &DecoderConfig) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..spans.len()).collect();
    order.sort_by_key(|&i| spans[i].start());
    order
        .windows(2)
        .filter_map(|w| {
            let (a, b) = (&spans[w[0]], &spans[w[1]]);
            let gap = sentence.tokens().get(a.end()..b.start())?;
            (a.role == b.role && config.is_coordination(gap)).then_some((w[0], w[1]))
        })
        .collect()
}

/// True iff every pair of coordinated spans has the same causes and the same
/// effects in `comb`.
pub fn check_conjunction(
    comb: &[Candidate],
    spans: &[CausalSpan],
    sentence: &Sentence,
    config: &DecoderConfig,
) -> bool {
    let pairs = coordinated_pairs(spans, sentence, config);
    check_coordination(comb, &pairs)
}

fn check_coordination(comb: &[Candidate], pairs: &[(usize, usize)]) -> bool {
    let effects_of = |s: usize| comb.iter().filter(|c| c.cause == s).map(|c| c.effect).collect::<BTreeSet<_>>();
    let causes_of = |s: usize| comb.iter().filter(|c| c.effect == s).map(|c| c.cause).collect::<BTreeSet<_>>();
    pairs.iter().all(|&(a, b)| effects_of(a) == effects_of(b) && causes_of(a) == causes_of(b))
}

/// Sum over candidates of the distance between cause and effect start tokens.
pub fn sum_distance(comb: &[Candidate], spans: &[CausalSpan]) -> usize {
    comb.iter().map(|c| spans[c.cause].start().abs_diff(spans[c.effect].start())).sum()
}

/// How a tag sequence was decoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoding {
    /// Sorted by cause start, then effect start.
    pub triplets: Vec<CausalTriplet>,
    pub spans: Vec<CausalSpan>,
    /// `None` when the sequence has no causal spans.
    pub class: Option<CausalityClass>,
    /// Combinations passing both checks at the selected size.
    pub passing: usize,
    /// Passing combinations sharing the minimal distance.
    pub tied: usize,
}

impl Decoding {
    /// The selection was not forced by the degree and coordination checks:
    /// several combinations passed and the distance rule picked one, or none
    /// passed.
    pub fn is_ambiguous(&self) -> bool {
        match self.class {
            Some(CausalityClass::Complex) => self.passing != 1,
            _ => false,
        }
    }
}

/// Converts a tag sequence into causal triplets with default settings.
pub fn tag2triplet(sentence: &Sentence, tags: &TagSequence) -> Result<Vec<CausalTriplet>, DecodeError> {
    decode(sentence, tags, &DecoderConfig::default()).map(|d| d.triplets)
}

pub fn decode(sentence: &Sentence, tags: &TagSequence, config: &DecoderConfig) -> Result<Decoding, DecodeError> {
    if tags.len() != sentence.len() {
        return Err(SchemeError::LengthMismatch { tags: tags.len(), tokens: sentence.len() }.into());
    }
    let spans = if config.repair { extract_spans(&repair_tags(tags))? } else { extract_spans(tags)? };
    let mut decoding = Decoding { triplets: Vec::new(), spans, class: None, passing: 0, tied: 0 };
    let class = match classify_causality(&decoding.spans) {
        Ok(class) => class,
        Err(SchemeError::NoCausality) => return Ok(decoding),
        Err(e) => return Err(e.into()),
    };
    decoding.class = Some(class);
    let spans = &decoding.spans;
    if spans.len() > config.max_spans {
        return Err(DecodeError::TooManySpans { spans: spans.len(), limit: config.max_spans });
    }

    let candidates = candidate_pairs(spans);
    let pairs = coordinated_pairs(spans, sentence, config);
    let selected = match class {
        CausalityClass::SimpleSingle => {
            if check_coordination(&candidates, &pairs) {
                decoding.passing = 1;
                decoding.tied = 1;
                candidates
            } else {
                Vec::new()
            }
        }
        CausalityClass::Complex => {
            let degrees = count_degrees(spans);
            let search = search_combinations(&candidates, &degrees, &pairs, spans, config)?;
            decoding.passing = search.passing;
            decoding.tied = search.tied;
            search.best.unwrap_or_default()
        }
    };

    let mut triplets: Vec<CausalTriplet> =
        selected.iter().map(|c| CausalTriplet::new(spans[c.cause].span, spans[c.effect].span)).collect();
    triplets.sort_by_key(|t| (t.cause.start, t.effect.start));
    decoding.triplets = triplets;
    Ok(decoding)
}

struct SearchResult {
    best: Option<Vec<Candidate>>,
    passing: usize,
    tied: usize,
}

fn search_combinations(
    candidates: &[Candidate],
    degrees: &[DegreeRecord],
    pairs: &[(usize, usize)],
    spans: &[CausalSpan],
    config: &DecoderConfig,
) -> Result<SearchResult, DecodeError> {
    let sum_out: usize = degrees.iter().map(|d| d.out_degree as usize).sum();
    let sum_in: usize = degrees.iter().map(|d| d.in_degree as usize).sum();
    let mut visited: u64 = 0;
    let mut chosen: Vec<Candidate> = Vec::new();

    for size in sum_out.max(sum_in).max(1)..=candidates.len() {
        let mut result = SearchResult { best: None, passing: 0, tied: 0 };
        let mut best_distance = usize::MAX;
        let mut indices: Vec<usize> = (0..size).collect();
        loop {
            visited += 1;
            if visited > config.max_combinations {
                return Err(DecodeError::CombinatorialBlowup { limit: config.max_combinations });
            }
            chosen.clear();
            chosen.extend(indices.iter().map(|&i| candidates[i]));
            if check_degree(&chosen, degrees) && check_coordination(&chosen, pairs) {
                result.passing += 1;
                let distance = sum_distance(&chosen, spans);
                // lexicographic enumeration: the first minimum is the smallest index sequence
                if distance < best_distance {
                    best_distance = distance;
                    result.best = Some(chosen.clone());
                    result.tied = 1;
                } else if distance == best_distance {
                    result.tied += 1;
                }
            }
            if !next_combination(&mut indices, candidates.len()) {
                break;
            }
        }
        if result.passing > 0 {
            return Ok(result);
        }
    }
    Ok(SearchResult { best: None, passing: 0, tied: 0 })
}

/// Advances `indices` to the next k-subset of `0..n` in lexicographic order.
fn next_combination(indices: &mut [usize], n: usize) -> bool {
    let k = indices.len();
    for pos in (0..k).rev() {
        if indices[pos] < n - k + pos {
            indices[pos] += 1;
            for next in pos + 1..k {
                indices[next] = indices[next - 1] + 1;
            }
            return true;
        }
    }
    false
}
