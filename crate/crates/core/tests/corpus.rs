//! Alignment, dataset round trips, vocabularies and segmentation.

use mlwa::corpus::dataset::{parse_blocks, write_blocks};
use mlwa::corpus::vocab::UNK_ID;
use mlwa::corpus::{align_chars_to_words, decode_sample, encode_sample, AlignedSample, Utterance, Vocabularies};
use mlwa::segmentation::{SegmentationDictionary, Segmenter};
use mlwa::Error;
use proptest::prelude::*;

/// Walks cumulative word lengths: character `t` belongs to the first word
/// whose running end exceeds `t`.
fn oracle(words: &[String]) -> Vec<usize> {
    let mut ends = Vec::new();
    let mut total = 0;
    for w in words {
        total += w.chars().count();
        ends.push(total);
    }
    (0..total)
        .map(|t| ends.iter().position(|&e| e > t).unwrap() + 1)
        .collect()
}

fn word_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!['甲', '乙', '丙', 'a', 'b']), 1..4)
        .prop_map(|cs| cs.into_iter().collect())
}

fn words_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(word_strategy(), 1..8)
}

/// A BIO sequence built from random spans, so it is always well formed.
fn tags_for(len: usize, seeds: &[u8]) -> Vec<String> {
    let types = ["x", "y", "z"];
    let mut tags = Vec::with_capacity(len);
    let mut t = 0;
    let mut k = 0;
    while t < len {
        let s = seeds[k % seeds.len()];
        k += 1;
        let span = 1 + (s as usize % 3).min(len - t - 1);
        if s.is_multiple_of(4) {
            tags.push("O".to_string());
            t += 1;
            continue;
        }
        let ty = types[s as usize % 3];
        tags.push(format!("B-{ty}"));
        for _ in 1..span {
            tags.push(format!("I-{ty}"));
        }
        t += span;
    }
    tags
}

fn sample_strategy() -> impl Strategy<Value = AlignedSample> {
    (words_strategy(), prop::collection::vec(any::<u8>(), 1..16), 0..3usize).prop_map(|(words, seeds, intent)| {
        let chars: Vec<char> = words.concat().chars().collect();
        let tags = tags_for(chars.len(), &seeds);
        let utterance = Utterance {
            chars,
            slot_tags: Some(tags),
            intent: Some(["Play", "Query", "Stop"][intent].to_string()),
        };
        AlignedSample::new(utterance, words).unwrap()
    })
}

/// Every composition of `n` into positive parts.
fn compositions(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    (1..=n)
        .flat_map(|first| {
            compositions(n - first).into_iter().map(move |mut rest| {
                rest.insert(0, first);
                rest
            })
        })
        .collect()
}

#[test]
fn alignment_matches_oracle_for_every_segmentation_up_to_length_eight() {
    let mut checked = 0;
    for n in 1..=8 {
        for text_bits in 0..(1u32 << n) {
            let chars: Vec<char> = (0..n)
                .map(|i| if text_bits >> i & 1 == 1 { 'b' } else { 'a' })
                .collect();
            for parts in compositions(n) {
                let mut words = Vec::new();
                let mut pos = 0;
                for p in parts {
                    words.push(chars[pos..pos + p].iter().collect::<String>());
                    pos += p;
                }
                let got = align_chars_to_words(&chars, &words).unwrap();
                assert_eq!(got.as_one_based(), oracle(&words).as_slice());
                checked += 1;
            }
        }
    }
    // sum over n of 2^n * 2^(n-1)
    assert_eq!(checked, (1..=8).map(|n| 1usize << (2 * n - 1)).sum::<usize>());
}

#[test]
fn worked_example_alignment() {
    let chars: Vec<char> = "周冬雨有哪些电影".chars().collect();
    let a = align_chars_to_words(&chars, &["周冬雨", "有", "哪些", "电影"]).unwrap();
    assert_eq!(a.as_one_based(), &[1, 1, 1, 2, 3, 3, 4, 4]);
    assert_eq!(a.num_words(), 4);
    // 1-based characters 3, 4 and 6 map to 0-based words 0, 1 and 2
    assert_eq!((a.word_of(2), a.word_of(3), a.word_of(5)), (0, 1, 2));
}

#[test]
fn mismatch_positions_are_one_based() {
    let chars: Vec<char> = "abcd".chars().collect();
    let position = |words: &[&str]| match align_chars_to_words(&chars, words) {
        Err(Error::Alignment { position }) => position,
        other => panic!("expected an alignment error, got {other:?}"),
    };
    assert_eq!(position(&["ab", "xd"]), 3);
    assert_eq!(position(&["x"]), 1);
    assert_eq!(position(&["abc"]), 4);
    assert_eq!(position(&["ab", "cde"]), 5);
}

proptest! {
    #[test]
    fn alignment_matches_oracle(words in words_strategy()) {
        let chars: Vec<char> = words.concat().chars().collect();
        let a = align_chars_to_words(&chars, &words).unwrap();
        prop_assert_eq!(a.as_one_based().to_vec(), oracle(&words));
        prop_assert_eq!(a.as_one_based()[0], 1);
        prop_assert_eq!(a.num_words(), words.len());
        prop_assert!(a.as_one_based().windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
    }

    #[test]
    fn each_character_sits_at_its_offset_in_its_word(words in words_strategy()) {
        let chars: Vec<char> = words.concat().chars().collect();
        let a = align_chars_to_words(&chars, &words).unwrap();
        let mut offset = 0;
        for t in 0..chars.len() {
            if t > 0 && a.word_of(t) != a.word_of(t - 1) {
                offset = 0;
            }
            let word: Vec<char> = words[a.word_of(t)].chars().collect();
            prop_assert_eq!(word[offset], chars[t]);
            offset += 1;
            if t + 1 == chars.len() || a.word_of(t + 1) != a.word_of(t) {
                prop_assert_eq!(offset, word.len());
            }
        }
    }

    #[test]
    fn parse_encode_decode_round_trip(samples in prop::collection::vec(sample_strategy(), 1..6)) {
        let utterances: Vec<Utterance> = samples.iter().map(|s| s.utterance.clone()).collect();
        let parsed = parse_blocks(&write_blocks(&utterances), "generated").unwrap();
        prop_assert_eq!(&parsed, &utterances);
        let vocabs = Vocabularies::build(&samples).unwrap();
        for s in &samples {
            let encoded = encode_sample(s, &vocabs).unwrap();
            prop_assert!(encoded.char_ids.iter().all(|&i| i < vocabs.chars.len() && i != UNK_ID));
            prop_assert!(encoded.word_ids.iter().all(|&i| i < vocabs.words.len() && i != UNK_ID));
            prop_assert_eq!(&decode_sample(&encoded, &vocabs).unwrap(), s);
        }
    }

    #[test]
    fn vocabularies_are_dense_and_unseen_symbols_are_unknown(samples in prop::collection::vec(sample_strategy(), 1..6)) {
        let vocabs = Vocabularies::build(&samples).unwrap();
        for v in [&vocabs.chars, &vocabs.words, &vocabs.slots, &vocabs.intents] {
            for (i, s) in v.symbols().iter().enumerate() {
                prop_assert_eq!(v.get(s), Some(i));
            }
        }
        prop_assert_eq!(vocabs.chars.get_or_unk("字"), UNK_ID);
        prop_assert_eq!(vocabs.words.get_or_unk("未见"), UNK_ID);
        // label vocabularies hold only what training used
        for s in vocabs.slots.symbols() {
            prop_assert!(samples.iter().any(|x| x.utterance.slot_tags.as_ref().unwrap().contains(s)));
        }
        prop_assert!(vocabs.intents.get("<unk>").is_none());
    }

    #[test]
    fn every_backend_covers_the_text(
        text in prop::collection::vec(prop::sample::select(vec!['甲', '乙', '丙', '丁', 'q']), 1..20),
        dict in prop::collection::vec(word_strategy(), 0..6),
    ) {
        let dictionary = SegmentationDictionary::from_words(dict.clone());
        for segmenter in [Segmenter::Dictionary(dictionary), Segmenter::Identity] {
            let words = segmenter.segment(&text).unwrap();
            prop_assert!(words.iter().all(|w| !w.is_empty()));
            prop_assert_eq!(words.concat(), text.iter().collect::<String>());
            // same input, same output
            prop_assert_eq!(segmenter.segment(&text).unwrap(), words);
        }
        let identity = Segmenter::Identity.segment(&text).unwrap();
        let a = align_chars_to_words(&text, &identity).unwrap();
        prop_assert_eq!(a.as_one_based().to_vec(), (1..=text.len()).collect::<Vec<_>>());
    }

    #[test]
    fn dictionary_words_are_found_whole(words in words_strategy()) {
        // a dictionary holding exactly the words, all of one length, recovers them
        let len = words[0].chars().count();
        let words: Vec<String> = words.into_iter().filter(|w| w.chars().count() == len).collect();
        let text: Vec<char> = words.concat().chars().collect();
        let dictionary = SegmentationDictionary::from_words(words.clone());
        prop_assert_eq!(dictionary.max_word_len(), len);
        prop_assert_eq!(Segmenter::Dictionary(dictionary).segment(&text).unwrap(), words);
    }
}
