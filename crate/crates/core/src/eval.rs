//! Triplet-level precision, recall and F1, multi-run aggregation and the
//! share of predicted causes (effects) left without their partner.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::corpus::Corpus;
use crate::decoder::{decode, DecoderConfig};
use crate::scheme::{CausalTriplet, Span};

/// Triplets per sentence id.
pub type TripletMap = BTreeMap<u32, Vec<CausalTriplet>>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("sentence {0} is present in only one of gold and predictions")]
    IdMismatch(u32),
    #[error("no runs to aggregate")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Metrics {
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Metrics { precision, recall, f1, correct, predicted, gold }
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P {:.4} R {:.4} F {:.4}", self.precision, self.recall, self.f1)
    }
}

fn check_ids(gold: &TripletMap, pred: &TripletMap) -> Result<(), EvalError> {
    if let Some(id) = gold.keys().find(|id| !pred.contains_key(id)) {
        return Err(EvalError::IdMismatch(*id));
    }
    if let Some(id) = pred.keys().find(|id| !gold.contains_key(id)) {
        return Err(EvalError::IdMismatch(*id));
    }
    Ok(())
}

/// Exact matches of predicted triplets against gold, each gold triplet
/// usable once.
fn matched(gold: &[CausalTriplet], pred: &[CausalTriplet]) -> Vec<bool> {
    let mut used = vec![false; gold.len()];
    pred.iter()
        .map(|p| match (0..gold.len()).find(|&i| !used[i] && gold[i] == *p) {
            Some(i) => {
                used[i] = true;
                true
            }
            None => false,
        })
        .collect()
}

pub fn triplet_prf(gold: &TripletMap, pred: &TripletMap) -> Result<Metrics, EvalError> {
    check_ids(gold, pred)?;
    let (mut correct, mut predicted, mut total) = (0, 0, 0);
    for (id, g) in gold {
        let p = &pred[id];
        correct += matched(g, p).iter().filter(|&&m| m).count();
        predicted += p.len();
        total += g.len();
    }
    Ok(Metrics::from_counts(correct, predicted, total))
}

/// Mean and sample standard deviation of one metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Self {
        if values.iter().all(|&v| v == values[0]) {
            return Summary { mean: values[0], std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Summary { mean, std }
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunAggregate {
    pub runs: usize,
    pub precision: Summary,
    pub recall: Summary,
    pub f1: Summary,
}

impl RunAggregate {
    /// `model<TAB>P±σ<TAB>R±σ<TAB>F±σ`
    pub fn report_row(&self, model: &str) -> String {
        format!("{model}\t{}\t{}\t{}", self.precision, self.recall, self.f1)
    }
}

pub fn aggregate_runs(runs: &[Metrics]) -> Result<RunAggregate, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::Empty);
    }
    let pick = |f: fn(&Metrics) -> f64| Summary::of(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(RunAggregate {
        runs: runs.len(),
        precision: pick(|m| m.precision),
        recall: pick(|m| m.recall),
        f1: pick(|m| m.f1),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingleRatios {
    pub rs_c: f64,
    pub rs_e: f64,
}

/// Over distinct predicted cause spans of each sentence, the fraction that
/// match a gold cause while no predicted triplet with that cause is correct.
/// `rs_e` is the same for effects. Empty denominators give 0.
pub fn single_ratios(gold: &TripletMap, pred: &TripletMap) -> Result<SingleRatios, EvalError> {
    check_ids(gold, pred)?;
    let mut counts = [(0usize, 0usize); 2];
    for (id, g) in gold {
        let p = &pred[id];
        let correct: Vec<CausalTriplet> = p.iter().zip(matched(g, p)).filter(|(_, m)| *m).map(|(t, _)| *t).collect();
        let sides: [fn(&CausalTriplet) -> Span; 2] = [|t| t.cause, |t| t.effect];
        for (side, count) in sides.iter().zip(counts.iter_mut()) {
            let predicted: BTreeSet<Span> = p.iter().map(side).collect();
            let gold_spans: BTreeSet<Span> = g.iter().map(side).collect();
            let paired: BTreeSet<Span> = correct.iter().map(side).collect();
            count.0 += predicted.iter().filter(|s| gold_spans.contains(s) && !paired.contains(s)).count();
            count.1 += predicted.len();
        }
    }
    let ratio = |(a, b): (usize, usize)| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(SingleRatios { rs_c: ratio(counts[0]), rs_e: ratio(counts[1]) })
}

/// Decodes every sentence's tags. Sentences whose tags cannot be decoded
/// contribute no triplets and are returned by id.
pub fn corpus_triplets(corpus: &Corpus, config: &DecoderConfig) -> (TripletMap, Vec<u32>) {
    let mut map = TripletMap::new();
    let mut failed = Vec::new();
    for a in corpus.iter() {
        let triplets = match decode(&a.sentence, &a.tags, config) {
            Ok(d) => d.triplets,
            Err(e) => {
                log::warn!("sentence {}: {e}", a.sentence.id);
                failed.push(a.sentence.id);
                Vec::new()
            }
        };
        map.insert(a.sentence.id, triplets);
    }
    (map, failed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use proptest::prelude::*;

    fn t(c: (usize, usize), e: (usize, usize)) -> CausalTriplet {
        CausalTriplet::new(Span::new(c.0, c.1), Span::new(e.0, e.1))
    }

    fn fixture_map() -> TripletMap {
        fixtures::all().into_iter().map(|(s, ts)| (s.id, ts)).collect()
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gold = fixture_map();
        let m = triplet_prf(&gold, &gold).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        assert_eq!(m.to_string(), "P 1.0000 R 1.0000 F 1.0000");

        let empty: TripletMap = gold.keys().map(|&k| (k, vec![])).collect();
        let m = triplet_prf(&gold, &empty).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn counts_arithmetic() {
        let m = Metrics::from_counts(250, 296, 296);
        assert!((m.precision - 0.844_594_594_6).abs() < 1e-9);
        assert_eq!(format!("{:.4}", m.f1), "0.8446");
    }

    #[test]
    fn ids_must_agree() {
        let gold = fixture_map();
        let mut pred = gold.clone();
        pred.remove(&3);
        assert_eq!(triplet_prf(&gold, &pred), Err(EvalError::IdMismatch(3)));
        pred.insert(3, vec![]);
        pred.insert(99, vec![]);
        assert_eq!(single_ratios(&gold, &pred), Err(EvalError::IdMismatch(99)));
    }

    #[test]
    fn duplicate_predictions_match_once() {
        let gold: TripletMap = [(0, vec![t((0, 1), (2, 3))])].into();
        let pred: TripletMap = [(0, vec![t((0, 1), (2, 3)), t((0, 1), (2, 3))])].into();
        let m = triplet_prf(&gold, &pred).unwrap();
        assert_eq!((m.correct, m.predicted, m.gold), (1, 2, 1));
    }

    #[test]
    fn aggregates() {
        let runs = [Metrics::from_counts(8, 10, 10), Metrics::from_counts(9, 10, 10)];
        let a = aggregate_runs(&runs).unwrap();
        assert!((a.f1.mean - 0.85).abs() < 1e-12);
        assert!((a.f1.std - 0.070_710_678).abs() < 1e-8);
        assert_eq!(a.report_row("ours"), "ours\t0.8500±0.0707\t0.8500±0.0707\t0.8500±0.0707");

        let one = aggregate_runs(&runs[..1]).unwrap();
        assert!((one.f1.mean - 0.8).abs() < 1e-12);
        assert_eq!(one.f1.std, 0.0);
        let same = aggregate_runs(&[runs[0]; 3]).unwrap();
        assert_eq!(same.precision.std, 0.0);
        assert_eq!(aggregate_runs(&[]), Err(EvalError::Empty));
    }

    #[test]
    fn single_ratio_cases() {
        let gold = fixture_map();
        assert_eq!(single_ratios(&gold, &gold).unwrap(), SingleRatios { rs_c: 0.0, rs_e: 0.0 });

        let g: TripletMap = [(0, vec![t((0, 2), (5, 6))])].into();
        let p: TripletMap = [(0, vec![t((0, 2), (4, 6))])].into();
        assert_eq!(single_ratios(&g, &p).unwrap(), SingleRatios { rs_c: 1.0, rs_e: 0.0 });

        let none: TripletMap = [(0, vec![])].into();
        assert_eq!(single_ratios(&g, &none).unwrap(), SingleRatios { rs_c: 0.0, rs_e: 0.0 });
    }

    #[test]
    fn decodes_corpus() {
        let mut corpus = Corpus::new("fixtures");
        for (s, ts) in fixtures::all() {
            let tags = crate::scheme::encode_triplets(&s, &ts).unwrap();
            corpus.push(s, tags).unwrap();
        }
        let (map, failed) = corpus_triplets(&corpus, &DecoderConfig::default());
        assert!(failed.is_empty());
        let mut expected = fixture_map()[&3].clone();
        expected.sort();
        assert_eq!(map[&3], expected);
    }

    fn arb_map() -> impl Strategy<Value = (TripletMap, TripletMap)> {
        let trip = (0usize..5, 1usize..3, 5usize..9, 1usize..3).prop_map(|(a, la, b, lb)| t((a, a + la), (b, b + lb)));
        proptest::collection::vec(
            (proptest::collection::vec(trip.clone(), 0..4), proptest::collection::vec(trip, 0..4)),
            1..6,
        )
        .prop_map(|rows| {
            let gold = rows.iter().enumerate().map(|(i, r)| (i as u32, r.0.clone())).collect();
            let pred = rows.iter().enumerate().map(|(i, r)| (i as u32, r.1.clone())).collect();
            (gold, pred)
        })
    }

    proptest! {
        #[test]
        fn metric_identities((gold, pred) in arb_map()) {
            let m = triplet_prf(&gold, &pred).unwrap();
            prop_assert!(m.correct <= m.predicted.min(m.gold));
            if m.precision + m.recall > 0.0 {
                let f = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                prop_assert!((m.f1 - f).abs() < 1e-12);
            }
            let r = single_ratios(&gold, &pred).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.rs_c) && (0.0..=1.0).contains(&r.rs_e));
        }

        #[test]
        fn order_independent((gold, pred) in arb_map()) {
            // relabel ids in reverse; BTreeMap iteration order changes
            let n = gold.len() as u32;
            let flip = |m: &TripletMap| m.iter().map(|(k, v)| (n - 1 - k, v.clone())).collect::<TripletMap>();
            prop_assert_eq!(triplet_prf(&gold, &pred).unwrap(), triplet_prf(&flip(&gold), &flip(&pred)).unwrap());
        }

        #[test]
        fn mean_within_range(values in proptest::collection::vec(0.0f64..1.0, 1..8)) {
            let runs: Vec<Metrics> = values.iter().map(|&v| Metrics { precision: v, recall: v, f1: v, correct: 0, predicted: 0, gold: 0 }).collect();
            let a = aggregate_runs(&runs).unwrap();
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(a.f1.mean >= lo - 1e-12 && a.f1.mean <= hi + 1e-12);
            prop_assert!(a.f1.std >= 0.0);
        }
    }
}
