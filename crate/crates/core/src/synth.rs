//! A tiny caption grammar used to build offline corpora and fixtures.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tokenizer::Vocab;
use crate::vecmath::{domain, stream_seed};

const ADJECTIVES: &[&str] = &[
    "red", "small", "large", "brown", "white", "black", "young", "old", "happy", "wet",
];
const SUBJECTS: &[&str] = &[
    "dog", "cat", "man", "woman", "child", "bird", "horse", "cow", "sheep", "boy", "girl",
    "bear",
];
const VERBS: &[&str] = &[
    "sits", "runs", "stands", "walks", "plays", "rests", "jumps", "waits", "sleeps", "eats",
];
const PREPOSITIONS: &[&str] = &["on", "near", "in", "beside", "under", "behind"];
const PLACES: &[&str] = &[
    "grass", "street", "beach", "table", "field", "road", "water", "bench", "snow", "park",
    "sand", "kitchen",
];
const OBJECTS: &[&str] = &["ball", "frisbee", "bag", "hat", "stick", "umbrella", "kite", "book"];

/// Subject nouns; each caption names exactly one.
pub fn subjects() -> &'static [&'static str] {
    SUBJECTS
}

/// The subject noun of a grammar caption.
pub fn subject_of(caption: &str) -> Option<&'static str> {
    caption
        .split_whitespace()
        .find_map(|w| SUBJECTS.iter().copied().find(|s| *s == w))
}

/// Every word the grammar can produce, in a fixed order.
pub fn grammar_words() -> Vec<&'static str> {
    let mut words = vec!["a", "the", "with"];
    for list in [ADJECTIVES, SUBJECTS, VERBS, PREPOSITIONS, PLACES, OBJECTS] {
        words.extend_from_slice(list);
    }
    words
}

/// The default toy vocabulary: specials, grammar words, filler up to `size`.
pub fn toy_vocab(size: usize) -> Result<Vocab> {
    Vocab::from_words(grammar_words(), size)
}

/// Samples one caption of the form
/// `a [adj] <subject> <verb> <prep> the <place> [with a <object>]`.
pub fn sample_caption<R: Rng + ?Sized>(rng: &mut R) -> String {
    let mut words: Vec<&str> = vec!["a"];
    if rng.random_bool(0.6) {
        words.push(ADJECTIVES.choose(rng).unwrap());
    }
    words.push(SUBJECTS.choose(rng).unwrap());
    words.push(VERBS.choose(rng).unwrap());
    words.push(PREPOSITIONS.choose(rng).unwrap());
    words.push("the");
    words.push(PLACES.choose(rng).unwrap());
    if rng.random_bool(0.3) {
        words.extend_from_slice(&["with", "a"]);
        words.push(OBJECTS.choose(rng).unwrap());
    }
    words.join(" ")
}

/// Caption `index` of the synthetic corpus for `seed`.
pub fn synthetic_caption(seed: u64, index: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, domain::SYNTHETIC_CAPTION, index));
    sample_caption(&mut rng)
}

pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<String> {
    (0..n as u64).map(|i| synthetic_caption(seed, i)).collect()
}
