//! Small generated corpora for smoke tests and gradient checks.
//!
//! Every utterance is built from template words (intent-specific fillers
//! and slot values) drawn from a lexicon in which no character is shared
//! between two words, so greedy dictionary segmentation recovers the
//! template words exactly.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{AlignedSample, Utterance};
use crate::segmentation::SegmentationDictionary;

const INTENT_NAMES: [&str; 4] = ["PlayMusic", "QueryWeather", "Navigate", "SetAlarm"];
const SLOT_NAMES: [&str; 5] = ["artist", "song", "city", "date", "device"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub utterances: usize,
    pub intents: usize,
    pub slot_types: usize,
    pub values_per_slot: usize,
    pub templates_per_intent: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            utterances: 50,
            intents: 4,
            slot_types: 5,
            values_per_slot: 3,
            templates_per_intent: 2,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub samples: Vec<AlignedSample>,
    pub dictionary: SegmentationDictionary,
    pub intents: Vec<String>,
    pub slot_types: Vec<String>,
}

enum Piece {
    Filler(String),
    Slot(usize),
}

struct CharPool(u32);

impl CharPool {
    fn word(&mut self, len: usize) -> String {
        (0..len)
            .map(|_| {
                let c = char::from_u32(0x4E00 + self.0).expect("CJK block");
                self.0 += 1;
                c
            })
            .collect()
    }
}

fn name(names: &[&str], i: usize) -> String {
    if i < names.len() {
        names[i].to_string()
    } else {
        format!("{}{}", names[i % names.len()], i / names.len())
    }
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticCorpus {
    assert!(spec.intents > 0 && spec.slot_types > 0 && spec.values_per_slot > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pool = CharPool(0);
    let mut dictionary = SegmentationDictionary::default();

    let slot_types: Vec<String> = (0..spec.slot_types).map(|i| name(&SLOT_NAMES, i)).collect();
    let intents: Vec<String> = (0..spec.intents).map(|i| name(&INTENT_NAMES, i)).collect();

    let values: Vec<Vec<String>> = (0..spec.slot_types)
        .map(|_| {
            (0..spec.values_per_slot)
                .map(|_| {
                    let len = rng.random_range(2..=3);
                    let w = pool.word(len);
                    dictionary.insert(w.clone());
                    w
                })
                .collect()
        })
        .collect();

    let mut filler = |rng: &mut ChaCha8Rng, dictionary: &mut SegmentationDictionary| {
        let len = rng.random_range(1..=2);
        let w = pool.word(len);
        dictionary.insert(w.clone());
        Piece::Filler(w)
    };

    let mut templates: Vec<Vec<Vec<Piece>>> = Vec::with_capacity(spec.intents);
    for i in 0..spec.intents {
        let mut per_intent = Vec::new();
        for j in 0..spec.templates_per_intent.max(1) {
            let first = (i * spec.templates_per_intent + j) % spec.slot_types;
            let mut pieces = vec![filler(&mut rng, &mut dictionary), Piece::Slot(first)];
            pieces.push(filler(&mut rng, &mut dictionary));
            if j % 2 == 1 && spec.slot_types > 1 {
                let second = (first + 1 + i) % spec.slot_types;
                let second = if second == first {
                    (first + 1) % spec.slot_types
                } else {
                    second
                };
                pieces.push(Piece::Slot(second));
                pieces.push(filler(&mut rng, &mut dictionary));
            }
            per_intent.push(pieces);
        }
        templates.push(per_intent);
    }

    let mut samples = Vec::with_capacity(spec.utterances);
    for n in 0..spec.utterances {
        let intent = n % spec.intents;
        let template = templates[intent].choose(&mut rng).expect("non-empty");
        let mut chars = Vec::new();
        let mut tags = Vec::new();
        let mut words = Vec::new();
        for piece in template {
            match piece {
                Piece::Filler(w) => {
                    chars.extend(w.chars());
                    tags.extend(w.chars().map(|_| "O".to_string()));
                    words.push(w.clone());
                }
                Piece::Slot(ty) => {
                    let w = values[*ty].choose(&mut rng).expect("non-empty");
                    for (k, c) in w.chars().enumerate() {
                        chars.push(c);
                        let prefix = if k == 0 { "B" } else { "I" };
                        tags.push(format!("{prefix}-{}", slot_types[*ty]));
                    }
                    words.push(w.clone());
                }
            }
        }
        debug_assert_eq!(dictionary.segment(&chars), words);
        let utterance = Utterance {
            chars,
            slot_tags: Some(tags),
            intent: Some(intents[intent].clone()),
        };
        samples.push(AlignedSample::new(utterance, words).expect("template words cover the text"));
    }

    SyntheticCorpus {
        samples,
        dictionary,
        intents,
        slot_types,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn default_corpus_shape() {
        let c = generate(&SyntheticSpec::default());
        assert_eq!(c.samples.len(), 50);
        let intents: HashSet<_> = c.samples.iter().map(|s| s.utterance.intent.clone().unwrap()).collect();
        assert_eq!(intents.len(), 4);
        let types: HashSet<String> = c
            .samples
            .iter()
            .flat_map(|s| s.utterance.slot_tags.clone().unwrap())
            .filter(|t| t != "O")
            .map(|t| t[2..].to_string())
            .collect();
        assert_eq!(types.len(), 5);
    }

    #[test]
    fn segmentation_is_dictionary_consistent() {
        let c = generate(&SyntheticSpec::default());
        for s in &c.samples {
            assert_eq!(c.dictionary.segment(&s.utterance.chars), s.words);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&SyntheticSpec::default());
        let b = generate(&SyntheticSpec::default());
        assert_eq!(a.samples, b.samples);
    }
}
