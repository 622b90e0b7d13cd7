//! Word segmentation backends.
//!
//! * `dictionary`: forward greedy longest match, falling back to single
//!   characters.
//! * `identity`: one word per character.
//! * `remote`: HTTP POST `{"text": ...}` to an external segmenter that
//!   answers `{"words": [...]}`.
//!
//! Every backend's output is checked to concatenate back to the input.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SegmentationDictionary {
    words: HashSet<String>,
    max_word_len: usize,
}

impl SegmentationDictionary {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut dict = Self::default();
        for w in words {
            dict.insert(w.into());
        }
        dict
    }

    pub fn insert(&mut self, word: String) {
        if word.is_empty() {
            return;
        }
        self.max_word_len = self.max_word_len.max(word.chars().count());
        self.words.insert(word);
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn max_word_len(&self) -> usize {
        self.max_word_len
    }

    /// Words in sorted order.
    pub fn sorted_words(&self) -> Vec<&str> {
        let sorted: BTreeSet<&str> = self.words.iter().map(String::as_str).collect();
        sorted.into_iter().collect()
    }

    /// Forward greedy longest match. Characters not starting any dictionary
    /// word become single-character words.
    pub fn segment(&self, text: &[char]) -> Vec<String> {
        let mut out = Vec::new();
        let mut i = 0;
        let mut candidate = String::new();
        while i < text.len() {
            let longest = self.max_word_len.min(text.len() - i);
            let mut taken = 1;
            for len in (2..=longest).rev() {
                candidate.clear();
                candidate.extend(&text[i..i + len]);
                if self.words.contains(&candidate) {
                    taken = len;
                    break;
                }
            }
            out.push(text[i..i + taken].iter().collect());
            i += taken;
        }
        out
    }

    pub fn to_file_contents(&self) -> String {
        let mut s = String::new();
        for w in self.sorted_words() {
            s.push_str(w);
            s.push('\n');
        }
        s
    }
}

/// Reads a dictionary with one word per line; blank lines are skipped.
pub fn load_dictionary(path: &Path) -> Result<SegmentationDictionary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(SegmentationDictionary::from_words(
        text.lines()
            .map(|l| l.trim_end_matches('\r').trim())
            .filter(|l| !l.is_empty()),
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Dictionary,
    Remote,
    Identity,
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dictionary" => Ok(Backend::Dictionary),
            "remote" => Ok(Backend::Remote),
            "identity" => Ok(Backend::Identity),
            other => Err(Error::Config(format!(
                "unknown segmenter backend {other:?} (expected dictionary, remote or identity)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub backend: Backend,
    /// Dictionary file. When absent for the dictionary backend, the
    /// dictionary is derived from the training data.
    pub dictionary_path: Option<PathBuf>,
    pub endpoint_url: Option<String>,
    pub timeout_ms: u64,
    /// For the remote backend: use the dictionary backend when the request
    /// fails.
    pub fallback_to_dictionary: bool,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Dictionary,
            dictionary_path: None,
            endpoint_url: None,
            timeout_ms: 5000,
            fallback_to_dictionary: false,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        match self.backend {
            Backend::Remote if self.endpoint_url.is_none() => {
                Err(Error::Config("remote segmenter needs endpoint_url".into()))
            }
            Backend::Remote if self.timeout_ms == 0 => {
                Err(Error::Config("remote segmenter timeout must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RemoteResponse {
    words: Vec<String>,
}

/// Client for the external segmenter protocol. Holds no mutable state, so
/// concurrent calls are independent requests.
#[derive(Clone, Debug)]
pub struct RemoteSegmenter {
    agent: ureq::Agent,
    url: String,
}

impl RemoteSegmenter {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent, url: url.into() }
    }

    /// Raw remote words, before the cover check.
    pub fn request(&self, text: &str) -> Result<Vec<String>> {
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(RemoteRequest { text })
            .map_err(|e| Error::Segmentation(format!("{}: {e}", self.url)))?;
        let status = resp.status();
        if status != 200 {
            return Err(Error::Segmentation(format!("{}: HTTP {status}", self.url)));
        }
        let body: RemoteResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Segmentation(format!("{}: bad response: {e}", self.url)))?;
        Ok(body.words)
    }
}

#[derive(Clone, Debug)]
pub enum Segmenter {
    Dictionary(SegmentationDictionary),
    Identity,
    Remote {
        client: RemoteSegmenter,
        fallback: Option<SegmentationDictionary>,
    },
}

impl Segmenter {
    /// Builds the configured backend. `derived` supplies the dictionary when
    /// the config names no file (the dictionary backend, or a remote
    /// fallback).
    pub fn from_config(config: &SegmenterConfig, derived: Option<SegmentationDictionary>) -> Result<Self> {
        config.validate()?;
        let dictionary = |derived: Option<SegmentationDictionary>| -> Result<SegmentationDictionary> {
            match &config.dictionary_path {
                Some(p) => load_dictionary(p),
                None => Ok(derived.unwrap_or_default()),
            }
        };
        Ok(match config.backend {
            Backend::Dictionary => Segmenter::Dictionary(dictionary(derived)?),
            Backend::Identity => Segmenter::Identity,
            Backend::Remote => Segmenter::Remote {
                client: RemoteSegmenter::new(
                    config.endpoint_url.clone().expect("validated"),
                    Duration::from_millis(config.timeout_ms),
                ),
                fallback: if config.fallback_to_dictionary {
                    Some(dictionary(derived)?)
                } else {
                    None
                },
            },
        })
    }

    pub fn segment(&self, text: &[char]) -> Result<Vec<String>> {
        if text.is_empty() {
            return Err(Error::Contract("cannot segment empty text".into()));
        }
        let words = match self {
            Segmenter::Dictionary(dict) => dict.segment(text),
            Segmenter::Identity => text.iter().map(|c| c.to_string()).collect(),
            Segmenter::Remote { client, fallback } => {
                let joined: String = text.iter().collect();
                match (client.request(&joined), fallback) {
                    (Ok(words), _) => words,
                    (Err(Error::Segmentation(_)), Some(dict)) => dict.segment(text),
                    (Err(e), _) => return Err(e),
                }
            }
        };
        check_cover(text, &words)?;
        Ok(words)
    }
}

fn check_cover(text: &[char], words: &[String]) -> Result<()> {
    if words.iter().any(String::is_empty) {
        return Err(Error::Validation("empty word in segmentation".into()));
    }
    let joined: String = words.concat();
    if !joined.chars().eq(text.iter().copied()) {
        return Err(Error::Validation(format!(
            "{:?} joined is {joined:?}",
            text.iter().collect::<String>()
        )));
    }
    Ok(())
}

/// One-shot segmentation with a freshly built backend.
pub fn segment(text: &[char], config: &SegmenterConfig) -> Result<Vec<String>> {
    Segmenter::from_config(config, None)?.segment(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    #[test]
    fn longest_match_wins() {
        let dict = SegmentationDictionary::from_words(["周", "周冬雨", "有", "哪些", "电影"]);
        assert_eq!(
            dict.segment(&chars("周冬雨有哪些电影")),
            ["周冬雨", "有", "哪些", "电影"]
        );
    }

    #[test]
    fn unknown_characters_fall_back_to_singles() {
        let dict = SegmentationDictionary::from_words(["有"]);
        assert_eq!(dict.segment(&chars("X有")), ["X", "有"]);
        let empty = SegmentationDictionary::default();
        assert_eq!(empty.segment(&chars("abc")), ["a", "b", "c"]);
    }

    #[test]
    fn identity_backend() {
        let cfg = SegmenterConfig {
            backend: Backend::Identity,
            ..Default::default()
        };
        assert_eq!(segment(&chars("周冬雨"), &cfg).unwrap(), ["周", "冬", "雨"]);
        assert!(segment(&[], &cfg).is_err());
    }

    #[test]
    fn dictionary_file_loading() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.txt");
        std::fs::write(&p, "周冬雨\n有\n").unwrap();
        let d = load_dictionary(&p).unwrap();
        assert_eq!((d.len(), d.max_word_len()), (2, 3));

        std::fs::write(&p, "").unwrap();
        let d = load_dictionary(&p).unwrap();
        assert_eq!((d.len(), d.max_word_len()), (0, 0));

        std::fs::write(&p, "有\n\n有\r\n").unwrap();
        assert_eq!(load_dictionary(&p).unwrap().len(), 1);

        assert!(matches!(
            load_dictionary(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn remote_requires_endpoint() {
        let cfg = SegmenterConfig {
            backend: Backend::Remote,
            ..Default::default()
        };
        assert!(matches!(Segmenter::from_config(&cfg, None), Err(Error::Config(_))));
    }

    /// Serves one canned HTTP response and returns the request body seen.
    fn serve_once(status: &'static str, body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/segment", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 1024];
            loop {
                let n = stream.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                let text = String::from_utf8_lossy(&buf);
                if let Some(split) = text.find("\r\n\r\n") {
                    let len: usize = text[..split]
                        .lines()
                        .find_map(|l| {
                            let l = l.to_ascii_lowercase();
                            l.strip_prefix("content-length:").map(|v| v.trim().parse().unwrap())
                        })
                        .unwrap_or(0);
                    if buf.len() >= split + 4 + len {
                        break;
                    }
                }
                if n == 0 {
                    break;
                }
            }
            let reply = format!(
                "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
            let text = String::from_utf8_lossy(&buf).to_string();
            text[text.find("\r\n\r\n").unwrap() + 4..].to_string()
        });
        (url, handle)
    }

    fn remote(url: String, fallback: bool) -> Segmenter {
        Segmenter::from_config(
            &SegmenterConfig {
                backend: Backend::Remote,
                endpoint_url: Some(url),
                timeout_ms: 2000,
                fallback_to_dictionary: fallback,
                ..Default::default()
            },
            Some(SegmentationDictionary::from_words(["周冬雨"])),
        )
        .unwrap()
    }

    #[test]
    fn remote_round_trip() {
        let (url, server) = serve_once("200 OK", r#"{"words": ["周冬雨", "有"]}"#);
        let words = remote(url, false).segment(&chars("周冬雨有")).unwrap();
        assert_eq!(words, ["周冬雨", "有"]);
        let request: serde_json::Value = serde_json::from_str(&server.join().unwrap()).unwrap();
        assert_eq!(request, serde_json::json!({"text": "周冬雨有"}));
    }

    #[test]
    fn remote_output_is_validated() {
        let (url, server) = serve_once("200 OK", r#"{"words": ["周冬", "有"]}"#);
        let err = remote(url, false).segment(&chars("周冬雨有")).unwrap_err();
        server.join().unwrap();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn remote_errors_and_fallback() {
        let (url, server) = serve_once("500 Internal Server Error", "{}");
        let err = remote(url, false).segment(&chars("周冬雨有")).unwrap_err();
        server.join().unwrap();
        assert!(matches!(err, Error::Segmentation(_)), "{err}");

        let (url, server) = serve_once("200 OK", r#"{"tokens": []}"#);
        let err = remote(url, false).segment(&chars("周冬雨有")).unwrap_err();
        server.join().unwrap();
        assert!(matches!(err, Error::Segmentation(_)), "{err}");

        // nothing listens on this port once the listener is dropped
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let url = format!("http://127.0.0.1:{port}/");
        assert!(remote(url.clone(), false).segment(&chars("周冬雨有")).is_err());
        assert_eq!(remote(url, true).segment(&chars("周冬雨有")).unwrap(), ["周冬雨", "有"]);
    }
}
