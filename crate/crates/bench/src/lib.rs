//! Deterministic inputs shared by the benchmarks.

use markscope_core::{Question, RubricItem, StudentAnswer, TaggedSegment};
use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};

const WORDS: &[&str] = &[
    "measure", "mass", "each", "sample", "before", "after", "record", "amount", "vinegar", "used", "the", "of",
    "containers", "size", "rinse", "dry", "marble", "limestone", "water", "Temperature",
];

pub fn question() -> Question {
    Question {
        id: "bench-q".into(),
        prompt_text: "Describe the additional information needed to replicate the experiment.".into(),
        key_elements: vec![
            "Measure the mass of each sample before and after".into(),
            "Record the amount of vinegar used".into(),
            "State the size of the containers".into(),
        ],
        rubric: vec![
            RubricItem { points: 1, description: "One key element".into() },
            RubricItem { points: 2, description: "Two key elements".into() },
            RubricItem { points: 3, description: "Three key elements".into() },
        ],
        max_mark: 3,
    }
}

pub fn text(seed: u64, words: usize) -> String {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..words).map(|_| *WORDS.choose(&mut rng).unwrap()).collect::<Vec<_>>().join(" ")
}

pub fn answers(n: usize) -> Vec<StudentAnswer> {
    (0..n)
        .map(|i| StudentAnswer {
            id: format!("a{i}").as_str().into(),
            question_id: "bench-q".into(),
            text: text(i as u64, 30),
            gold_mark: Some((i % 4) as i64),
        })
        .collect()
}

/// `n` (gold, predicted) pairs over `classes` marks.
pub fn pairs(n: usize, classes: u32) -> Vec<(u32, u32)> {
    let mut rng = StdRng::seed_from_u64(n as u64);
    (0..n).map(|_| (rng.random_range(0..classes), rng.random_range(0..classes))).collect()
}

/// Every `stride`-th word of `source` as a segment, in order.
pub fn segments(source: &str, stride: usize) -> Vec<TaggedSegment> {
    source
        .split_whitespace()
        .step_by(stride)
        .map(|w| TaggedSegment::new(w.to_uppercase(), "element_1"))
        .collect()
}
