//! Dataset readers.
//!
//! The block format is one `"<char> <tag>"` line per character, then a
//! `"=> <intent>"` line, then a blank line. The JSON-lines form carries the
//! same content as `{"chars": [...], "slots": [...], "intent": "..."}`,
//! optionally with a `"words"` segmentation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single utterance. Gold fields are absent for prediction-only input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub chars: Vec<char>,
    pub slot_tags: Option<Vec<String>>,
    pub intent: Option<String>,
}

impl Utterance {
    pub fn unlabeled(text: &str) -> Self {
        Self {
            chars: text.chars().collect(),
            slot_tags: None,
            intent: None,
        }
    }

    pub fn text(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn is_labeled(&self) -> bool {
        self.slot_tags.is_some() && self.intent.is_some()
    }

    /// Checks the length and tag-shape invariants.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.chars.is_empty() {
            return Err("utterance has no characters".into());
        }
        if let Some(tags) = &self.slot_tags {
            if tags.len() != self.chars.len() {
                return Err(format!("{} slot tags for {} characters", tags.len(), self.chars.len()));
            }
            if let Some(bad) = tags.iter().find(|t| !is_bio_tag(t)) {
                return Err(format!("tag {bad:?} is not O, B-<type> or I-<type>"));
            }
        }
        Ok(())
    }
}

/// `O`, `B-<type>` or `I-<type>` with a non-empty type.
pub fn is_bio_tag(tag: &str) -> bool {
    if tag == "O" {
        return true;
    }
    match tag.split_once('-') {
        Some(("B" | "I", ty)) => !ty.is_empty() && !ty.contains(char::is_whitespace),
        _ => false,
    }
}

fn parse_error(path: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

/// Parses the block format. `origin` names the source in error messages.
pub fn parse_blocks(text: &str, origin: &str) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    let mut chars = Vec::new();
    let mut tags = Vec::new();
    // Set once the intent line of the current block has been read.
    let mut closed: Option<String> = None;

    let mut finish = |chars: &mut Vec<char>, tags: &mut Vec<String>, intent: String| {
        out.push(Utterance {
            chars: std::mem::take(chars),
            slot_tags: Some(std::mem::take(tags)),
            intent: Some(intent),
        });
    };

    let mut last_line = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        last_line = line_no;
        let line = raw.strip_suffix('\r').unwrap_or(raw);

        if line.is_empty() {
            match closed.take() {
                Some(intent) => finish(&mut chars, &mut tags, intent),
                None if chars.is_empty() => {}
                None => {
                    return Err(parse_error(
                        origin,
                        line_no,
                        "block ends without an \"=> <intent>\" line",
                    ))
                }
            }
            continue;
        }
        if closed.is_some() {
            return Err(parse_error(
                origin,
                line_no,
                "expected a blank line after the intent line",
            ));
        }
        if let Some(intent) = line.strip_prefix("=> ") {
            if chars.is_empty() {
                return Err(parse_error(origin, line_no, "intent line without any characters"));
            }
            let intent = intent.trim();
            if intent.is_empty() {
                return Err(parse_error(origin, line_no, "empty intent label"));
            }
            closed = Some(intent.to_string());
            continue;
        }

        let mut it = line.chars();
        let ch = it.next().expect("non-empty line");
        let rest = it.as_str();
        let Some(tag) = rest.strip_prefix(' ') else {
            return Err(parse_error(
                origin,
                line_no,
                format!("expected \"<char> <tag>\", got {line:?} (tag count does not match character count)"),
            ));
        };
        if !is_bio_tag(tag) {
            return Err(parse_error(
                origin,
                line_no,
                format!("tag {tag:?} is not O, B-<type> or I-<type>"),
            ));
        }
        chars.push(ch);
        tags.push(tag.to_string());
    }

    match closed {
        Some(intent) => finish(&mut chars, &mut tags, intent),
        None if chars.is_empty() => {}
        None => {
            return Err(parse_error(
                origin,
                last_line + 1,
                "input ends without an \"=> <intent>\" line",
            ))
        }
    }
    Ok(out)
}

/// Writes utterances in the block format. Unlabeled utterances are skipped.
pub fn write_blocks(utterances: &[Utterance]) -> String {
    let mut out = String::new();
    for u in utterances {
        let (Some(tags), Some(intent)) = (&u.slot_tags, &u.intent) else {
            continue;
        };
        for (c, t) in u.chars.iter().zip(tags) {
            out.push(*c);
            out.push(' ');
            out.push_str(t);
            out.push('\n');
        }
        out.push_str("=> ");
        out.push_str(intent);
        out.push_str("\n\n");
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JsonRecord {
    pub chars: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slots: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub words: Option<Vec<String>>,
}

/// A JSON-lines record: the utterance and its optional gold segmentation.
pub type JsonSample = (Utterance, Option<Vec<String>>);

pub fn parse_jsonl(text: &str, origin: &str) -> Result<Vec<JsonSample>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(line).map_err(|e| parse_error(origin, line_no, e.to_string()))?;
        let mut chars = Vec::with_capacity(rec.chars.len());
        for c in &rec.chars {
            let mut it = c.chars();
            match (it.next(), it.next()) {
                (Some(ch), None) => chars.push(ch),
                _ => return Err(parse_error(origin, line_no, format!("{c:?} is not a single character"))),
            }
        }
        let u = Utterance {
            chars,
            slot_tags: rec.slots,
            intent: rec.intent,
        };
        u.validate().map_err(|m| parse_error(origin, line_no, m))?;
        out.push((u, rec.words));
    }
    Ok(out)
}

pub fn to_json_record(u: &Utterance, words: Option<&[String]>) -> JsonRecord {
    JsonRecord {
        chars: u.chars.iter().map(|c| c.to_string()).collect(),
        slots: u.slot_tags.clone(),
        intent: u.intent.clone(),
        words: words.map(<[String]>::to_vec),
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn is_jsonl(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("jsonl" | "json"))
}

/// Reads a block-format dataset file.
pub fn parse_dataset(path: &Path) -> Result<Vec<Utterance>> {
    parse_blocks(&read(path)?, &path.display().to_string())
}

/// Reads either format, choosing JSON lines for `.jsonl`/`.json` files.
pub fn load_dataset(path: &Path) -> Result<Vec<JsonSample>> {
    let text = read(path)?;
    let origin = path.display().to_string();
    if is_jsonl(path) {
        parse_jsonl(&text, &origin)
    } else {
        Ok(parse_blocks(&text, &origin)?.into_iter().map(|u| (u, None)).collect())
    }
}

/// Reads utterances to label: JSON lines, the block format (gold fields are
/// kept), or plain text with one utterance per line.
pub fn load_prediction_input(path: &Path) -> Result<Vec<Utterance>> {
    let text = read(path)?;
    let origin = path.display().to_string();
    if is_jsonl(path) {
        return Ok(parse_jsonl(&text, &origin)?.into_iter().map(|(u, _)| u).collect());
    }
    if text.lines().any(|l| l.starts_with("=> ")) {
        return parse_blocks(&text, &origin);
    }
    Ok(text
        .lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .filter(|l| !l.is_empty())
        .map(Utterance::unlabeled)
        .collect())
}
