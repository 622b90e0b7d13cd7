use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::AlignedSample;
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Bijection between symbols and dense indices, in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(symbols: Vec<String>) -> Self {
        let index = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { symbols, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.symbols
    }
}

impl Vocab {
    /// Empty vocabulary with `<pad>` at 0 and `<unk>` at 1.
    pub fn with_specials() -> Self {
        Self::from(vec![PAD.to_string(), UNK.to_string()])
    }

    pub fn add(&mut self, symbol: &str) -> usize {
        if let Some(&i) = self.index.get(symbol) {
            return i;
        }
        let i = self.symbols.len();
        self.symbols.push(symbol.to_string());
        self.index.insert(symbol.to_string(), i);
        i
    }

    pub fn get(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    /// Lookup that maps unseen symbols to `<unk>`.
    pub fn get_or_unk(&self, symbol: &str) -> usize {
        self.get(symbol).unwrap_or(UNK_ID)
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub chars: Vocab,
    pub words: Vocab,
    pub slots: Vocab,
    pub intents: Vocab,
}

impl Vocabularies {
    /// Builds all four vocabularies from labeled training samples.
    pub fn build(train: &[AlignedSample]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Contract(
                "cannot build vocabularies from an empty training set".into(),
            ));
        }
        let mut v = Self {
            chars: Vocab::with_specials(),
            words: Vocab::with_specials(),
            slots: Vocab::default(),
            intents: Vocab::default(),
        };
        let mut buf = [0u8; 4];
        for s in train {
            let (Some(tags), Some(intent)) = (&s.utterance.slot_tags, &s.utterance.intent) else {
                return Err(Error::Contract(format!(
                    "training utterance {:?} has no gold labels",
                    s.utterance.text()
                )));
            };
            for c in &s.utterance.chars {
                v.chars.add(c.encode_utf8(&mut buf));
            }
            for w in &s.words {
                v.words.add(w);
            }
            for t in tags {
                v.slots.add(t);
            }
            v.intents.add(intent);
        }
        Ok(v)
    }

    /// SHA-256 over the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("vocabularies serialize");
        hex::encode(Sha256::digest(&json))
    }
}

pub fn build_vocabularies(train: &[AlignedSample]) -> Result<Vocabularies> {
    Vocabularies::build(train)
}
