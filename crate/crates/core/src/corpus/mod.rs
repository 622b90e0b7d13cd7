//! Datasets, vocabularies, character-to-word alignment and integer encoding.

pub mod align;
pub mod dataset;
pub mod synthetic;
pub mod vocab;

use serde::{Deserialize, Serialize};

pub use align::{align_chars_to_words, Alignment};
pub use dataset::{load_dataset, parse_dataset, Utterance};
pub use vocab::{build_vocabularies, Vocab, Vocabularies};

use crate::error::{Error, Result};

/// An utterance with its word segmentation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedSample {
    pub utterance: Utterance,
    pub words: Vec<String>,
    pub alignment: Alignment,
}

impl AlignedSample {
    pub fn new(utterance: Utterance, words: Vec<String>) -> Result<Self> {
        utterance.validate().map_err(Error::Contract)?;
        let alignment = align_chars_to_words(&utterance.chars, &words)?;
        Ok(Self {
            utterance,
            words,
            alignment,
        })
    }
}

/// Integer-indexed view of an [`AlignedSample`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSample {
    pub char_ids: Vec<usize>,
    pub word_ids: Vec<usize>,
    pub alignment: Alignment,
    pub slot_ids: Option<Vec<usize>>,
    pub intent_id: Option<usize>,
}

impl EncodedSample {
    pub fn len(&self) -> usize {
        self.char_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.char_ids.is_empty()
    }

    pub fn num_words(&self) -> usize {
        self.word_ids.len()
    }

    pub fn is_labeled(&self) -> bool {
        self.slot_ids.is_some() && self.intent_id.is_some()
    }
}

/// Encodes a sample. Unseen characters and words become `<unk>`; unseen
/// gold labels are an error.
pub fn encode_sample(sample: &AlignedSample, vocabs: &Vocabularies) -> Result<EncodedSample> {
    let mut buf = [0u8; 4];
    let char_ids = sample
        .utterance
        .chars
        .iter()
        .map(|c| vocabs.chars.get_or_unk(c.encode_utf8(&mut buf)))
        .collect();
    let word_ids = sample.words.iter().map(|w| vocabs.words.get_or_unk(w)).collect();
    let slot_ids = sample
        .utterance
        .slot_tags
        .as_ref()
        .map(|tags| {
            tags.iter()
                .map(|t| {
                    vocabs.slots.get(t).ok_or_else(|| Error::Encoding {
                        vocab: "slot",
                        label: t.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let intent_id = sample
        .utterance
        .intent
        .as_ref()
        .map(|i| {
            vocabs.intents.get(i).ok_or_else(|| Error::Encoding {
                vocab: "intent",
                label: i.clone(),
            })
        })
        .transpose()?;
    Ok(EncodedSample {
        char_ids,
        word_ids,
        alignment: sample.alignment.clone(),
        slot_ids,
        intent_id,
    })
}

/// Maps ids back to symbols. `<unk>` entries come back as the literal
/// `<unk>` symbol, so only OOV-free samples round-trip exactly.
pub fn decode_sample(encoded: &EncodedSample, vocabs: &Vocabularies) -> Result<AlignedSample> {
    let lookup = |v: &Vocab, id: usize, what: &'static str| {
        v.symbol(id).map(str::to_string).ok_or(Error::Index {
            what,
            index: id,
            len: v.len(),
        })
    };
    let chars = encoded
        .char_ids
        .iter()
        .map(|&id| {
            let s = lookup(&vocabs.chars, id, "char vocabulary")?;
            let mut it = s.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => Ok(c),
                _ => Err(Error::Contract(format!("char id {id} decodes to {s:?}"))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let words = encoded
        .word_ids
        .iter()
        .map(|&id| lookup(&vocabs.words, id, "word vocabulary"))
        .collect::<Result<Vec<_>>>()?;
    let slot_tags = encoded
        .slot_ids
        .as_ref()
        .map(|ids| {
            ids.iter()
                .map(|&id| lookup(&vocabs.slots, id, "slot vocabulary"))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let intent = encoded
        .intent_id
        .map(|id| lookup(&vocabs.intents, id, "intent vocabulary"))
        .transpose()?;
    Ok(AlignedSample {
        utterance: Utterance {
            chars,
            slot_tags,
            intent,
        },
        words,
        alignment: encoded.alignment.clone(),
    })
}

/// Samples encoded against one set of vocabularies, tagged with its hash.
#[derive(Clone, Debug)]
pub struct EncodedDataset {
    pub vocab_hash: String,
    pub samples: Vec<EncodedSample>,
}

impl EncodedDataset {
    pub fn encode(samples: &[AlignedSample], vocabs: &Vocabularies) -> Result<Self> {
        Ok(Self {
            vocab_hash: vocabs.hash(),
            samples: samples
                .iter()
                .map(|s| encode_sample(s, vocabs))
                .collect::<Result<_>>()?,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Splits off the last `fraction` of `samples` (at least one when there are
/// two or more) as a validation set.
pub fn split_validation<T: Clone>(samples: &[T], fraction: f64) -> (Vec<T>, Vec<T>) {
    let n = samples.len();
    let mut dev = ((n as f64) * fraction).round() as usize;
    if n >= 2 {
        dev = dev.clamp(1, n - 1);
    } else {
        dev = 0;
    }
    let cut = n - dev;
    (samples[..cut].to_vec(), samples[cut..].to_vec())
}
