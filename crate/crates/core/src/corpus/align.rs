use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Character-to-word alignment.
///
/// Stored 1-based: entry `t` is the position of the word containing
/// character `t`, so the word "周冬雨" in 周冬雨/有/哪些/电影 gives
/// `[1, 1, 1, 2, 3, 3, 4, 4]`. [`Alignment::word_of`] is the only place the
/// indices turn 0-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Alignment(Vec<usize>);

impl Alignment {
    /// Validates a 1-based index sequence: non-decreasing, starts at 1,
    /// steps by at most 1.
    pub fn from_one_based(indices: Vec<usize>) -> Result<Self> {
        let mut prev = 0;
        for (t, &i) in indices.iter().enumerate() {
            let ok = if t == 0 { i == 1 } else { i == prev || i == prev + 1 };
            if !ok {
                return Err(Error::Contract(format!(
                    "alignment index {i} at character {} does not follow {prev}",
                    t + 1
                )));
            }
            prev = i;
        }
        Ok(Self(indices))
    }

    pub fn as_one_based(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of words covered (the last index).
    pub fn num_words(&self) -> usize {
        self.0.last().copied().unwrap_or(0)
    }

    /// 0-based word row for 0-based character position `t`.
    pub fn word_of(&self, t: usize) -> usize {
        self.0[t] - 1
    }

    pub fn identity(n: usize) -> Self {
        Self((1..=n).collect())
    }
}

/// Maps every character to the (1-based) index of the word containing it.
///
/// Fails with the 1-based position of the first character where the
/// concatenated words stop matching `chars`.
pub fn align_chars_to_words<S: AsRef<str>>(chars: &[char], words: &[S]) -> Result<Alignment> {
    let mut alignment = Vec::with_capacity(chars.len());
    let mut pos = 0;
    for (w, word) in words.iter().enumerate() {
        let word = word.as_ref();
        if word.is_empty() {
            return Err(Error::Alignment { position: pos + 1 });
        }
        for ch in word.chars() {
            if chars.get(pos) != Some(&ch) {
                return Err(Error::Alignment { position: pos + 1 });
            }
            alignment.push(w + 1);
            pos += 1;
        }
    }
    if pos != chars.len() {
        return Err(Error::Alignment { position: pos + 1 });
    }
    Ok(Alignment(alignment))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    #[test]
    fn worked_example() {
        let a = align_chars_to_words(&chars("周冬雨有哪些电影"), &["周冬雨", "有", "哪些", "电影"]).unwrap();
        assert_eq!(a.as_one_based(), &[1, 1, 1, 2, 3, 3, 4, 4]);
        assert_eq!(a.as_one_based()[2], 1);
        assert_eq!(a.as_one_based()[3], 2);
        assert_eq!(a.as_one_based()[5], 3);
        assert_eq!(a.word_of(5), 2);
        assert_eq!(a.num_words(), 4);
    }

    #[test]
    fn single_word_and_identity() {
        let cs = chars("abcde");
        assert_eq!(align_chars_to_words(&cs, &["abcde"]).unwrap().as_one_based(), &[1; 5]);
        let singles: Vec<String> = cs.iter().map(|c| c.to_string()).collect();
        assert_eq!(align_chars_to_words(&cs, &singles).unwrap(), Alignment::identity(5));
    }

    #[test]
    fn mismatch_reports_first_divergence() {
        let cs = chars("abcd");
        assert!(matches!(
            align_chars_to_words(&cs, &["ab", "xd"]),
            Err(Error::Alignment { position: 3 })
        ));
        assert!(matches!(
            align_chars_to_words(&cs, &["ab"]),
            Err(Error::Alignment { position: 3 })
        ));
        assert!(matches!(
            align_chars_to_words(&cs, &["abcde"]),
            Err(Error::Alignment { position: 5 })
        ));
        assert!(matches!(
            align_chars_to_words(&cs, &["ab", "", "cd"]),
            Err(Error::Alignment { position: 3 })
        ));
    }

    #[test]
    fn one_based_validation() {
        assert!(Alignment::from_one_based(vec![1, 1, 2, 3, 3]).is_ok());
        assert!(Alignment::from_one_based(vec![0, 1]).is_err());
        assert!(Alignment::from_one_based(vec![1, 3]).is_err());
        assert!(Alignment::from_one_based(vec![1, 2, 1]).is_err());
    }
}
