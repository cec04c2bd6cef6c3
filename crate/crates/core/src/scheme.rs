//! The causality tagging scheme.
//!
//! Every token carries one of seven tags: `O` for tokens outside any causal
//! event, and `B-`/`I-` tags for the first and following tokens of a Cause
//! (`C`), an Effect (`E`) or an embedded event (`Emb`) that acts as the Cause
//! of one triplet and the Effect of another.
//!
//! Spans use 0-based, half-open token ranges.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Semantic role of a causal event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Cause,
    Effect,
    Embedded,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Cause, Role::Effect, Role::Embedded];

    pub fn suffix(self) -> &'static str {
        match self {
            Role::Cause => "C",
            Role::Effect => "E",
            Role::Embedded => "Emb",
        }
    }

    /// `(out_degree, in_degree)` of a span carrying this role.
    pub fn degrees(self) -> (u8, u8) {
        match self {
            Role::Cause => (1, 0),
            Role::Effect => (0, 1),
            Role::Embedded => (1, 1),
        }
    }
}

/// Position of a token inside a span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Position {
    Begin,
    Inside,
}

/// One of the seven labels.
///
/// The discriminant is the label index used by the tagger's output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    O = 0,
    BeginCause = 1,
    InsideCause = 2,
    BeginEffect = 3,
    InsideEffect = 4,
    BeginEmb = 5,
    InsideEmb = 6,
}

/// Number of distinct tags.
pub const NUM_TAGS: usize = 7;

impl Tag {
    pub const ALL: [Tag; NUM_TAGS] =
        [Tag::O, Tag::BeginCause, Tag::InsideCause, Tag::BeginEffect, Tag::InsideEffect, Tag::BeginEmb, Tag::InsideEmb];

    pub fn new(position: Position, role: Role) -> Tag {
        match (position, role) {
            (Position::Begin, Role::Cause) => Tag::BeginCause,
            (Position::Inside, Role::Cause) => Tag::InsideCause,
            (Position::Begin, Role::Effect) => Tag::BeginEffect,
            (Position::Inside, Role::Effect) => Tag::InsideEffect,
            (Position::Begin, Role::Embedded) => Tag::BeginEmb,
            (Position::Inside, Role::Embedded) => Tag::InsideEmb,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Tag> {
        Tag::ALL.get(index).copied()
    }

    /// Position and role, or `None` for `O`.
    pub fn parts(self) -> Option<(Position, Role)> {
        match self {
            Tag::O => None,
            Tag::BeginCause => Some((Position::Begin, Role::Cause)),
            Tag::InsideCause => Some((Position::Inside, Role::Cause)),
            Tag::BeginEffect => Some((Position::Begin, Role::Effect)),
            Tag::InsideEffect => Some((Position::Inside, Role::Effect)),
            Tag::BeginEmb => Some((Position::Begin, Role::Embedded)),
            Tag::InsideEmb => Some((Position::Inside, Role::Embedded)),
        }
    }

    pub fn role(self) -> Option<Role> {
        self.parts().map(|(_, r)| r)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::O => "O",
            Tag::BeginCause => "B-C",
            Tag::InsideCause => "I-C",
            Tag::BeginEffect => "B-E",
            Tag::InsideEffect => "I-E",
            Tag::BeginEmb => "B-Emb",
            Tag::InsideEmb => "I-Emb",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown tag {0:?}")]
pub struct UnknownTag(pub String);

impl FromStr for Tag {
    type Err = UnknownTag;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Tag::ALL.iter().copied().find(|t| t.as_str() == s).ok_or_else(|| UnknownTag(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemeError {
    #[error("sentence has no tokens")]
    EmptySentence,
    #[error("token {index} is empty or contains a tab or line break")]
    BadToken { index: usize },
    #[error("span [{start}, {end}) lies outside a sentence of {len} tokens")]
    OutOfRange { start: usize, end: usize, len: usize },
    #[error("spans [{}, {}) and [{}, {}) overlap without identical boundaries", .0.start, .0.end, .1.start, .1.end)]
    PartialOverlap(Span, Span),
    #[error("span [{}, {}) is both cause and effect of the same triplet", .0.start, .0.end)]
    SelfLoop(Span),
    #[error("tag sequence has {tags} tags for {tokens} tokens")]
    LengthMismatch { tags: usize, tokens: usize },
    #[error("malformed tag sequence: {0}")]
    MalformedTags(ValidationReport),
    #[error("no causal spans in tag sequence")]
    NoCausality,
}

/// A pre-tokenized sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub id: u32,
    tokens: Vec<String>,
}

impl Sentence {
    pub fn new(id: u32, tokens: Vec<String>) -> Result<Self, SchemeError> {
        if tokens.is_empty() {
            return Err(SchemeError::EmptySentence);
        }
        if let Some(index) = tokens.iter().position(|t| t.is_empty() || t.contains(['\t', '\n', '\r'])) {
            return Err(SchemeError::BadToken { index });
        }
        Ok(Sentence { id, tokens })
    }

    /// Splits on ASCII whitespace.
    pub fn from_text(id: u32, text: &str) -> Result<Self, SchemeError> {
        Sentence::new(id, text.split_whitespace().map(str::to_string).collect())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens of `span` joined by single spaces.
    pub fn text(&self, span: Span) -> String {
        self.tokens[span.start..span.end].join(" ")
    }
}

/// Half-open token range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// A role-typed span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CausalSpan {
    pub role: Role,
    pub span: Span,
}

impl CausalSpan {
    pub fn new(role: Role, start: usize, end: usize) -> Self {
        CausalSpan { role, span: Span::new(start, end) }
    }

    pub fn start(&self) -> usize {
        self.span.start
    }

    pub fn end(&self) -> usize {
        self.span.end
    }
}

/// An ordered (cause, effect) pair of spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CausalTriplet {
    pub cause: Span,
    pub effect: Span,
}

impl CausalTriplet {
    pub fn new(cause: Span, effect: Span) -> Self {
        CausalTriplet { cause, effect }
    }

    pub fn texts(&self, sentence: &Sentence) -> (String, String) {
        (sentence.text(self.cause), sentence.text(self.effect))
    }
}

/// Per-token labeling of a sentence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TagSequence(pub Vec<Tag>);

impl TagSequence {
    pub fn all_outside(len: usize) -> Self {
        TagSequence(vec![Tag::O; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tags(&self) -> &[Tag] {
        &self.0
    }

    pub fn parse<'a>(labels: impl IntoIterator<Item = &'a str>) -> Result<Self, UnknownTag> {
        labels.into_iter().map(str::parse).collect::<Result<_, _>>().map(TagSequence)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.0.iter().map(|t| t.index()).collect()
    }
}

impl FromIterator<Tag> for TagSequence {
    fn from_iter<I: IntoIterator<Item = Tag>>(iter: I) -> Self {
        TagSequence(iter.into_iter().collect())
    }
}

impl fmt::Display for TagSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, tag) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{tag}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    /// An `I-` tag at the start of the sentence or after `O`.
    OrphanInside { index: usize, role: Role },
    /// An `I-` tag continuing a span of a different role.
    RoleMismatch { index: usize, expected: Role, found: Role },
}

impl Violation {
    pub fn index(&self) -> usize {
        match *self {
            Violation::OrphanInside { index, .. } | Violation::RoleMismatch { index, .. } => index,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::OrphanInside { index, role } => {
                write!(f, "I-{} at token {index} does not continue a span", role.suffix())
            }
            Violation::RoleMismatch { index, expected, found } => {
                write!(f, "I-{} at token {index} continues a {} span", found.suffix(), expected.suffix())
            }
        }
    }
}

/// Violations found by [`validate_tags`]; empty iff the sequence is well-formed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Builds the tag sequence annotating `triplets` over `sentence`.
///
/// A span used only as a cause is tagged `C`, only as an effect `E`, and as
/// the cause of one triplet and the effect of another `Emb`. Distinct spans
/// must not overlap.
pub fn encode_triplets(sentence: &Sentence, triplets: &[CausalTriplet]) -> Result<TagSequence, SchemeError> {
    let n = sentence.len();
    // span -> (used as cause, used as effect)
    let mut usage: BTreeMap<Span, (bool, bool)> = BTreeMap::new();
    for t in triplets {
        for span in [t.cause, t.effect] {
            if span.is_empty() || span.end > n {
                return Err(SchemeError::OutOfRange { start: span.start, end: span.end, len: n });
            }
        }
        if t.cause == t.effect {
            return Err(SchemeError::SelfLoop(t.cause));
        }
        usage.entry(t.cause).or_default().0 = true;
        usage.entry(t.effect).or_default().1 = true;
    }

    // BTreeMap orders spans by start, so overlap can only occur between neighbours.
    let spans: Vec<Span> = usage.keys().copied().collect();
    for pair in spans.windows(2) {
        if pair[0].overlaps(&pair[1]) {
            return Err(SchemeError::PartialOverlap(pair[0], pair[1]));
        }
    }

    let mut tags = vec![Tag::O; n];
    for (span, (as_cause, as_effect)) in usage {
        let role = match (as_cause, as_effect) {
            (true, true) => Role::Embedded,
            (true, false) => Role::Cause,
            _ => Role::Effect,
        };
        tags[span.start] = Tag::new(Position::Begin, role);
        for tag in &mut tags[span.start + 1..span.end] {
            *tag = Tag::new(Position::Inside, role);
        }
    }
    Ok(TagSequence(tags))
}

/// Lists every BIO violation in `tags`.
pub fn validate_tags(tags: &TagSequence) -> ValidationReport {
    let mut violations = Vec::new();
    let mut open: Option<Role> = None;
    for (index, tag) in tags.0.iter().enumerate() {
        match tag.parts() {
            None => open = None,
            Some((Position::Begin, role)) => open = Some(role),
            Some((Position::Inside, role)) => match open {
                None => violations.push(Violation::OrphanInside { index, role }),
                Some(expected) if expected != role => {
                    violations.push(Violation::RoleMismatch { index, expected, found: role })
                }
                Some(_) => {}
            },
        }
    }
    ValidationReport { violations }
}

/// Rewrites every `I-` tag that does not continue a span of its role to `O`.
pub fn repair_tags(tags: &TagSequence) -> TagSequence {
    let mut out = tags.clone();
    let mut open: Option<Role> = None;
    for tag in &mut out.0 {
        match tag.parts() {
            None => open = None,
            Some((Position::Begin, role)) => open = Some(role),
            Some((Position::Inside, role)) => {
                if open != Some(role) {
                    *tag = Tag::O;
                    open = None;
                }
            }
        }
    }
    out
}

/// Maximal `B`-led runs, left to right.
pub fn extract_spans(tags: &TagSequence) -> Result<Vec<CausalSpan>, SchemeError> {
    let report = validate_tags(tags);
    if !report.is_valid() {
        return Err(SchemeError::MalformedTags(report));
    }
    let mut spans: Vec<CausalSpan> = Vec::new();
    for (index, tag) in tags.0.iter().enumerate() {
        match tag.parts() {
            None => {}
            Some((Position::Begin, role)) => spans.push(CausalSpan::new(role, index, index + 1)),
            Some((Position::Inside, _)) => {
                // validation guarantees an open span of the same role
                if let Some(last) = spans.last_mut() {
                    last.span.end = index + 1;
                }
            }
        }
    }
    Ok(spans)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CausalityClass {
    /// No embedded events and exactly one cause or exactly one effect.
    SimpleSingle,
    /// Embedded events, or several causes and several effects.
    Complex,
}

/// Counts of spans per role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RoleCounts {
    pub cause: usize,
    pub effect: usize,
    pub embedded: usize,
}

impl RoleCounts {
    pub fn of(spans: &[CausalSpan]) -> Self {
        let mut counts = RoleCounts::default();
        for s in spans {
            match s.role {
                Role::Cause => counts.cause += 1,
                Role::Effect => counts.effect += 1,
                Role::Embedded => counts.embedded += 1,
            }
        }
        counts
    }
}

pub fn classify_causality(spans: &[CausalSpan]) -> Result<CausalityClass, SchemeError> {
    if spans.is_empty() {
        return Err(SchemeError::NoCausality);
    }
    let counts = RoleCounts::of(spans);
    if counts.embedded == 0 && (counts.cause == 1 || counts.effect == 1) {
        Ok(CausalityClass::SimpleSingle)
    } else {
        Ok(CausalityClass::Complex)
    }
}
