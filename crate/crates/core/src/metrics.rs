//! Chunk-based slot F1, intent accuracy and overall (frame) accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A typed span of a BIO sequence, with 0-based inclusive bounds.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Chunk {
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

impl Chunk {
    pub fn new(kind: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            kind: kind.into(),
            start,
            end,
        }
    }
}

fn split_tag(tag: &str) -> Option<(char, &str)> {
    let mut it = tag.chars();
    let prefix = it.next()?;
    match (prefix, it.next()) {
        ('B' | 'I', Some('-')) if tag.len() > 2 => Some((prefix, &tag[2..])),
        _ => None,
    }
}

/// Chunks of a BIO sequence, conlleval style: `I-x` that does not continue
/// an open chunk of type `x` opens a new one. Anything that is not `B-x` or
/// `I-x` counts as `O`.
pub fn extract_chunks<S: AsRef<str>>(tags: &[S]) -> Vec<Chunk> {
    let mut chunks = Vec::new();
    let mut open: Option<(&str, usize)> = None;
    for (t, tag) in tags.iter().enumerate() {
        let parsed = split_tag(tag.as_ref());
        let continues = matches!((parsed, open), (Some(('I', kind)), Some((cur, _))) if kind == cur);
        if continues {
            continue;
        }
        if let Some((kind, start)) = open.take() {
            chunks.push(Chunk::new(kind, start, t - 1));
        }
        if let Some((_, kind)) = parsed {
            open = Some((kind, t));
        }
    }
    if let Some((kind, start)) = open {
        chunks.push(Chunk::new(kind, start, tags.len() - 1));
    }
    chunks
}

/// Same chunks with 1-based bounds, for display.
pub fn extract_chunks_one_based<S: AsRef<str>>(tags: &[S]) -> Vec<Chunk> {
    extract_chunks(tags)
        .into_iter()
        .map(|c| Chunk::new(c.kind, c.start + 1, c.end + 1))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub slot_f1: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub intent_accuracy: f64,
    pub overall_accuracy: f64,
    /// Fraction of utterances whose tag sequence matches exactly.
    pub exact_slot_accuracy: f64,
    pub utterances: usize,
    #[serde(flatten)]
    pub counts: ChunkCounts,
    /// Raw counts per slot type.
    pub per_type: BTreeMap<String, ChunkCounts>,
}

/// Gold or predicted labels of one utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    pub tags: Vec<String>,
    pub intent: String,
}

impl Labels {
    pub fn new<S: AsRef<str>>(tags: &[S], intent: &str) -> Self {
        Self {
            tags: tags.iter().map(|t| t.as_ref().to_string()).collect(),
            intent: intent.to_string(),
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 from chunk counts. All three are 1 when there
/// are no chunks on either side.
pub fn prf(counts: ChunkCounts) -> (f64, f64, f64) {
    let ChunkCounts { tp, fp, fn_ } = counts;
    if tp + fp + fn_ == 0 {
        return (1.0, 1.0, 1.0);
    }
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

pub fn compute_metrics(golds: &[Labels], preds: &[Labels]) -> Result<Metrics> {
    if golds.len() != preds.len() {
        return Err(Error::Contract(format!(
            "{} gold utterances but {} predictions",
            golds.len(),
            preds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::Contract("cannot score an empty corpus".into()));
    }
    let mut counts = ChunkCounts::default();
    let mut per_type: BTreeMap<String, ChunkCounts> = BTreeMap::new();
    let (mut intent_ok, mut slots_ok, mut both_ok) = (0, 0, 0);
    for (i, (gold, pred)) in golds.iter().zip(preds).enumerate() {
        if gold.tags.len() != pred.tags.len() {
            return Err(Error::Contract(format!(
                "utterance {}: {} gold tags but {} predicted",
                i + 1,
                gold.tags.len(),
                pred.tags.len()
            )));
        }
        let g = extract_chunks(&gold.tags);
        let p = extract_chunks(&pred.tags);
        for c in &p {
            let entry = per_type.entry(c.kind.clone()).or_default();
            if g.contains(c) {
                counts.tp += 1;
                entry.tp += 1;
            } else {
                counts.fp += 1;
                entry.fp += 1;
            }
        }
        for c in g.iter().filter(|c| !p.contains(c)) {
            counts.fn_ += 1;
            per_type.entry(c.kind.clone()).or_default().fn_ += 1;
        }
        let intent_match = gold.intent == pred.intent;
        let slot_match = gold.tags == pred.tags;
        intent_ok += usize::from(intent_match);
        slots_ok += usize::from(slot_match);
        both_ok += usize::from(intent_match && slot_match);
    }
    let n = golds.len();
    let (slot_precision, slot_recall, slot_f1) = prf(counts);
    Ok(Metrics {
        slot_f1,
        slot_precision,
        slot_recall,
        intent_accuracy: ratio(intent_ok, n),
        overall_accuracy: ratio(both_ok, n),
        exact_slot_accuracy: ratio(slots_ok, n),
        utterances: n,
        counts,
        per_type,
    })
}

impl Metrics {
    /// Plain-text table of the headline numbers.
    pub fn table(&self) -> String {
        let rows = [
            ("slot precision", self.slot_precision),
            ("slot recall", self.slot_recall),
            ("slot F1", self.slot_f1),
            ("intent accuracy", self.intent_accuracy),
            ("overall accuracy", self.overall_accuracy),
        ];
        let mut out = String::new();
        for (name, value) in rows {
            out.push_str(&format!("{name:<18}{value:.4}\n"));
        }
        out.push_str(&format!(
            "{:<18}{} (tp {}, fp {}, fn {})\n",
            "utterances", self.utterances, self.counts.tp, self.counts.fp, self.counts.fn_
        ));
        out
    }
}
