//! Annotated example sentences covering each causality pattern.
//!
//! Used by the unit tests and the acceptance suite.

use crate::scheme::{CausalTriplet, Sentence, Span};

fn sentence(id: u32, text: &str) -> Sentence {
    Sentence::from_text(id, text).expect("fixture sentences are non-empty")
}

fn triplet(cause: (usize, usize), effect: (usize, usize)) -> CausalTriplet {
    CausalTriplet::new(Span::new(cause.0, cause.1), Span::new(effect.0, effect.1))
}

/// One cause, one effect.
pub fn single() -> (Sentence, Vec<CausalTriplet>) {
    (sentence(1, "Financial stress is one of the main causes of divorce ."), vec![triplet((0, 2), (9, 10))])
}

/// A cause and an effect far apart.
pub fn long_range() -> (Sentence, Vec<CausalTriplet>) {
    (
        sentence(
            2,
            "The lesions were located in the distal spinal cord , which in turn explains the \
             distally predominant and a less severe proximal weakness .",
        ),
        vec![triplet((0, 2), (15, 23))],
    )
}

/// "the chronic inflammation" is the effect of one triplet and the cause of
/// another; spans sit at tokens [5, 8), [17, 20) and [22, 26).
pub fn embedded() -> (Sentence, Vec<CausalTriplet>) {
    (
        sentence(
            3,
            "Most ulcer patients suffer from the chronic inflammation of the stomach lining , \
             which is caused by Helicobacter pylori infection and causes an increased acid \
             production .",
        ),
        vec![triplet((17, 20), (5, 8)), triplet((5, 8), (22, 26))],
    )
}

/// Five coordinated causes sharing one effect.
pub fn shared_effect() -> (Sentence, Vec<CausalTriplet>) {
    (
        sentence(
            4,
            "The damages caused by mudslides , tremors , subsidence , superficial or underground \
             water were verified , as well as swelling clay soils .",
        ),
        vec![
            triplet((4, 5), (0, 2)),
            triplet((6, 7), (0, 2)),
            triplet((8, 9), (0, 2)),
            triplet((10, 14), (0, 2)),
            triplet((20, 23), (0, 2)),
        ],
    )
}

/// Two triplets that share neither cause nor effect.
pub fn separated() -> (Sentence, Vec<CausalTriplet>) {
    (
        sentence(
            5,
            "The disaster was triggered by torrential rains , while the damage was caused by the \
             typhoon .",
        ),
        vec![triplet((5, 7), (0, 2)), triplet((14, 16), (9, 11))],
    )
}

/// An embedded event that causes two separate effects.
pub fn embedded_fan_out() -> (Sentence, Vec<CausalTriplet>) {
    (
        sentence(
            6,
            "This year 's Nobel Laureates in Physiology or Medicine made the remarkable and \
             unexpected discovery that inflammation in the stomach as well as ulceration of the \
             stomach or duodenum is the result of an infection of the stomach caused by the \
             bacterium Helicobacter pylori .",
        ),
        vec![triplet((33, 35), (16, 17)), triplet((33, 35), (23, 24)), triplet((40, 44), (33, 35))],
    )
}

/// Two causes joined by "and" sharing an effect.
pub fn coordinated_causes() -> (Sentence, Vec<CausalTriplet>) {
    (
        sentence(7, "Bacteria and comedonal debris clog the pores and cause acne ."),
        vec![triplet((0, 1), (9, 10)), triplet((2, 4), (9, 10))],
    )
}

/// A sentence without causality.
pub fn negative() -> (Sentence, Vec<CausalTriplet>) {
    (sentence(8, "The committee met on Tuesday to review the budget ."), vec![])
}

pub fn all() -> Vec<(Sentence, Vec<CausalTriplet>)> {
    vec![
        single(),
        long_range(),
        embedded(),
        shared_effect(),
        separated(),
        embedded_fan_out(),
        coordinated_causes(),
        negative(),
    ]
}
