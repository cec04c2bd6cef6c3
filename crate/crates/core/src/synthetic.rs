//! Synthetic data: random causal layouts and templated training corpora.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::scheme::{CausalTriplet, Sentence, Span};

const CONTENT_WORDS: &[&str] = &[
    "heavy",
    "rain",
    "flooding",
    "stress",
    "fatigue",
    "smoke",
    "fire",
    "virus",
    "fever",
    "drought",
    "famine",
    "erosion",
    "pollution",
    "disease",
    "inflation",
    "poverty",
    "storm",
    "damage",
    "injury",
    "pain",
    "noise",
    "insomnia",
    "friction",
    "heat",
    "corrosion",
    "leak",
    "outage",
    "delay",
    "congestion",
    "accident",
    "infection",
    "swelling",
    "toxic",
    "chemical",
    "exposure",
    "severe",
    "chronic",
    "sudden",
    "minor",
    "economic",
    "crisis",
    "tax",
    "cut",
    "protest",
];

const CAUSE_FIRST: &[&[&str]] = &[
    &["causes"],
    &["caused"],
    &["leads", "to"],
    &["led", "to"],
    &["results", "in"],
    &["triggered"],
    &["produces"],
    &["is", "responsible", "for"],
];

const EFFECT_FIRST: &[&[&str]] = &[
    &["is", "caused", "by"],
    &["was", "caused", "by"],
    &["results", "from"],
    &["was", "triggered", "by"],
    &["comes", "from"],
    &["is", "due", "to"],
];

const CLAUSE_BREAKS: &[&[&str]] = &[&["while"], &[";", "meanwhile"], &[",", "whereas"], &["but"], &[";", "separately"]];

const COORDINATIONS: &[&[&str]] = &[&[","], &["and"], &["or"], &[",", "and"], &["as", "well", "as"]];

const FILLERS: &[&str] = &["in", "fact", "reportedly", "last", "year", "experts", "say", "that"];

/// A generated sentence with its gold triplets.
#[derive(Debug, Clone)]
pub struct Layout {
    pub sentence: Sentence,
    pub triplets: Vec<CausalTriplet>,
}

#[derive(Clone, Copy)]
enum Clause {
    Single,
    FanOut(usize),
    FanIn(usize),
    Chain,
    ChainFanOut,
}

struct Builder<'r, R: Rng> {
    rng: &'r mut R,
    tokens: Vec<String>,
}

impl<R: Rng> Builder<'_, R> {
    fn push(&mut self, words: &[&str]) {
        self.tokens.extend(words.iter().map(|w| w.to_string()));
    }

    fn phrase(&mut self) -> Span {
        let start = self.tokens.len();
        if self.rng.gen_bool(0.3) {
            self.push(&["the"]);
        }
        let len = self.rng.gen_range(1..=3);
        for _ in 0..len {
            let w = *CONTENT_WORDS.choose(self.rng).unwrap();
            self.push(&[w]);
        }
        Span::new(start, self.tokens.len())
    }

    fn pick(&mut self, table: &[&[&'static str]]) {
        let words = *table.choose(self.rng).unwrap();
        self.push(words);
    }

    /// `count` coordinated phrases.
    fn group(&mut self, count: usize) -> Vec<Span> {
        let mut spans = Vec::with_capacity(count);
        for k in 0..count {
            if k > 0 {
                self.pick(COORDINATIONS);
            }
            spans.push(self.phrase());
        }
        spans
    }

    /// Two role groups joined by a causal connective.
    fn linked(&mut self, causes: usize, effects: usize) -> (Vec<Span>, Vec<Span>) {
        if self.rng.gen_bool(0.5) {
            let c = self.group(causes);
            self.pick(CAUSE_FIRST);
            let e = self.group(effects);
            (c, e)
        } else {
            let e = self.group(effects);
            self.pick(EFFECT_FIRST);
            let c = self.group(causes);
            (c, e)
        }
    }

    fn clause(&mut self, kind: Clause, out: &mut Vec<CausalTriplet>) {
        let all_pairs = |c: &[Span], e: &[Span], out: &mut Vec<CausalTriplet>| {
            for &cs in c {
                for &es in e {
                    out.push(CausalTriplet::new(cs, es));
                }
            }
        };
        match kind {
            Clause::Single => {
                let (c, e) = self.linked(1, 1);
                all_pairs(&c, &e, out);
            }
            Clause::FanOut(k) => {
                let (c, e) = self.linked(1, k);
                all_pairs(&c, &e, out);
            }
            Clause::FanIn(k) => {
                let (c, e) = self.linked(k, 1);
                all_pairs(&c, &e, out);
            }
            Clause::Chain | Clause::ChainFanOut => {
                let effects = if matches!(kind, Clause::Chain) { 1 } else { 2 };
                // cause -> middle -> effects, written forwards or backwards
                let (c, m, e) = if self.rng.gen_bool(0.5) {
                    let c = self.phrase();
                    self.pick(CAUSE_FIRST);
                    let m = self.phrase();
                    self.push(&[",", "which"]);
                    self.pick(CAUSE_FIRST);
                    let e = self.group(effects);
                    (c, m, e)
                } else {
                    let e = self.group(effects);
                    self.pick(EFFECT_FIRST);
                    let m = self.phrase();
                    self.push(&[",", "which"]);
                    self.pick(EFFECT_FIRST);
                    let c = self.phrase();
                    (c, m, e)
                };
                out.push(CausalTriplet::new(c, m));
                all_pairs(&[m], &e, out);
            }
        }
    }
}

/// Draws a sentence whose causal structure is a sequence of clauses, each a
/// single pair, a fan-out, a fan-in or a chain through an embedded event.
pub fn random_layout<R: Rng>(id: u32, rng: &mut R) -> Layout {
    // mean ~1.6 triplets per sentence, close to annotated causal sentences
    let clauses = match rng.gen_range(0..100) {
        0..=95 => 1,
        96..=98 => 2,
        _ => 3,
    };
    let mut b = Builder { rng, tokens: Vec::new() };
    let mut triplets = Vec::new();
    if b.rng.gen_bool(0.3) {
        let n = b.rng.gen_range(1..=3);
        for _ in 0..n {
            let w = *FILLERS.choose(b.rng).unwrap();
            b.push(&[w]);
        }
    }
    for k in 0..clauses {
        if k > 0 {
            b.pick(CLAUSE_BREAKS);
        }
        let kind = match b.rng.gen_range(0..100) {
            0..=64 => Clause::Single,
            65..=74 => Clause::FanOut(b.rng.gen_range(2..=3)),
            75..=84 => Clause::FanIn(b.rng.gen_range(2..=4)),
            85..=94 => Clause::Chain,
            _ => Clause::ChainFanOut,
        };
        b.clause(kind, &mut triplets);
    }
    b.push(&["."]);
    let sentence = Sentence::new(id, b.tokens).expect("generated tokens are non-empty");
    triplets.sort();
    Layout { sentence, triplets }
}

const SUBJECTS: &[&str] = &[
    "smoking",
    "stress",
    "rain",
    "pollution",
    "poverty",
    "fire",
    "heat",
    "drought",
    "noise",
    "infection",
    "inflation",
    "flooding",
    "erosion",
    "corrosion",
    "fatigue",
    "radiation",
];

const OBJECTS: &[&str] = &[
    "cancer",
    "divorce",
    "floods",
    "asthma",
    "crime",
    "damage",
    "burns",
    "famine",
    "insomnia",
    "fever",
    "unemployment",
    "landslides",
    "collapse",
    "leaks",
    "accidents",
    "mutations",
];

const MODIFIERS: &[&str] = &["severe", "chronic", "heavy", "sudden", "mild", "widespread"];

fn noun_phrase<R: Rng>(rng: &mut R, heads: &[&str], tokens: &mut Vec<String>) -> Span {
    let start = tokens.len();
    if rng.gen_bool(0.3) {
        tokens.push("the".into());
    }
    if rng.gen_bool(0.4) {
        tokens.push(MODIFIERS.choose(rng).unwrap().to_string());
    }
    tokens.push(heads.choose(rng).unwrap().to_string());
    Span::new(start, tokens.len())
}

/// Sentences built from a handful of causal and non-causal templates, e.g.
/// "X causes Y", "Y is caused by X" and "X is near Y".
pub fn templated_corpus<R: Rng>(count: usize, rng: &mut R) -> Vec<Layout> {
    (0..count)
        .map(|i| {
            let mut tokens: Vec<String> = Vec::new();
            let push = |tokens: &mut Vec<String>, words: &[&str]| tokens.extend(words.iter().map(|w| w.to_string()));
            let mut triplets = Vec::new();
            match rng.gen_range(0..6) {
                0 => {
                    let c = noun_phrase(rng, SUBJECTS, &mut tokens);
                    push(&mut tokens, &["causes"]);
                    let e = noun_phrase(rng, OBJECTS, &mut tokens);
                    triplets.push(CausalTriplet::new(c, e));
                }
                1 => {
                    let e = noun_phrase(rng, OBJECTS, &mut tokens);
                    push(&mut tokens, &["is", "caused", "by"]);
                    let c = noun_phrase(rng, SUBJECTS, &mut tokens);
                    triplets.push(CausalTriplet::new(c, e));
                }
                2 => {
                    let c = noun_phrase(rng, SUBJECTS, &mut tokens);
                    push(&mut tokens, &["leads", "to"]);
                    let e = noun_phrase(rng, OBJECTS, &mut tokens);
                    triplets.push(CausalTriplet::new(c, e));
                }
                3 => {
                    let e = noun_phrase(rng, OBJECTS, &mut tokens);
                    push(&mut tokens, &["results", "from"]);
                    let c = noun_phrase(rng, SUBJECTS, &mut tokens);
                    triplets.push(CausalTriplet::new(c, e));
                }
                4 => {
                    noun_phrase(rng, SUBJECTS, &mut tokens);
                    push(&mut tokens, &["is", "near"]);
                    noun_phrase(rng, OBJECTS, &mut tokens);
                }
                _ => {
                    noun_phrase(rng, OBJECTS, &mut tokens);
                    push(&mut tokens, &["was", "seen", "with"]);
                    noun_phrase(rng, SUBJECTS, &mut tokens);
                }
            }
            tokens.push(".".into());
            let sentence = Sentence::new(i as u32, tokens).expect("template tokens are non-empty");
            Layout { sentence, triplets }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheme::{encode_triplets, validate_tags};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layouts_encode_cleanly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..500 {
            let layout = random_layout(i, &mut rng);
            let tags = encode_triplets(&layout.sentence, &layout.triplets).unwrap();
            assert!(validate_tags(&tags).is_valid());
            assert!(!layout.triplets.is_empty());
        }
    }

    #[test]
    fn templated_corpus_is_seeded() {
        let a = templated_corpus(20, &mut ChaCha8Rng::seed_from_u64(1));
        let b = templated_corpus(20, &mut ChaCha8Rng::seed_from_u64(1));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.sentence, y.sentence);
            assert_eq!(x.triplets, y.triplets);
        }
        assert!(a.iter().any(|l| l.triplets.is_empty()));
    }
}
