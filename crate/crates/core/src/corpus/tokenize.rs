use super::vocab::{Vocab, CLS};
use crate::error::{Error, Result};

/// Words longer than this many characters are split into chunks of this size.
pub const MAX_CHUNK_CHARS: usize = 12;

/// Token ids with word alignment. Position 0 is always CLS with word index -1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub token_ids: Vec<usize>,
    pub word_index: Vec<isize>,
}

impl TokenSeq {
    /// Token count excluding CLS.
    pub fn n(&self) -> usize {
        self.token_ids.len() - 1
    }

    pub fn word_count(&self) -> usize {
        self.word_index.last().map_or(0, |&w| (w + 1).max(0) as usize)
    }

    /// Word index of non-CLS token `j` (0-based over non-CLS tokens).
    pub fn word_of(&self, j: usize) -> usize {
        self.word_index[j + 1] as usize
    }

    /// Non-CLS token ranges per word, as `start..end` over non-CLS positions.
    pub fn word_spans(&self) -> Vec<std::ops::Range<usize>> {
        let mut spans: Vec<std::ops::Range<usize>> = Vec::with_capacity(self.word_count());
        for j in 0..self.n() {
            let w = self.word_of(j);
            if w == spans.len() {
                spans.push(j..j + 1);
            } else {
                spans[w].end = j + 1;
            }
        }
        spans
    }
}

/// Lowercases and drops user mentions and URLs.
pub fn preprocess(text: &str) -> String {
    text.split_whitespace()
        .filter(|w| {
            !(w.starts_with('@')
                || w.starts_with("http://")
                || w.starts_with("https://")
                || w.starts_with("www."))
        })
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Fixed sub-word split: consecutive chunks of at most [`MAX_CHUNK_CHARS`] characters.
pub fn split_word(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .chunks(MAX_CHUNK_CHARS)
        .map(|c| c.iter().collect())
        .collect()
}

/// Tokenizes already preprocessed text, splitting words on whitespace.
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<TokenSeq> {
    let words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    tokenize_words(&words, vocab)
}

pub fn tokenize_words(words: &[String], vocab: &Vocab) -> Result<TokenSeq> {
    if words.is_empty() {
        return Err(Error::invalid("text", "empty after preprocessing"));
    }
    let mut token_ids = vec![CLS];
    let mut word_index = vec![-1];
    for (w, word) in words.iter().enumerate() {
        if word.is_empty() || word.chars().any(char::is_whitespace) {
            return Err(Error::invalid("text", format!("word {w} is empty or contains whitespace")));
        }
        for chunk in split_word(word) {
            token_ids.push(vocab.id_or_unk(&chunk));
            word_index.push(w as isize);
        }
    }
    Ok(TokenSeq {
        token_ids,
        word_index,
    })
}

/// Expands word labels onto tokens (split tokens inherit their word's label).
/// The result includes the CLS position, labeled 0.
pub fn word_labels_to_token_labels(word_labels: &[u8], tokens: &TokenSeq) -> Result<Vec<u8>> {
    if word_labels.len() != tokens.word_count() {
        return Err(Error::invalid(
            "word_labels",
            format!(
                "{} labels for {} words",
                word_labels.len(),
                tokens.word_count()
            ),
        ));
    }
    Ok(tokens
        .word_index
        .iter()
        .map(|&w| if w < 0 { 0 } else { word_labels[w as usize] })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::UNK;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn two_known_words() {
        let v = Vocab::from_tokens(["tree", "uprooted"]);
        let t = tokenize(&preprocess("Tree uprooted"), &v).unwrap();
        assert_eq!(t.token_ids, vec![CLS, v.id("tree").unwrap(), v.id("uprooted").unwrap()]);
        assert_eq!(t.word_index, vec![-1, 0, 1]);
    }

    #[test]
    fn single_word() {
        let v = Vocab::from_tokens(["flood"]);
        let t = tokenize("flood", &v).unwrap();
        assert_eq!(t.n(), 1);
        assert_eq!(t.word_index, vec![-1, 0]);
    }

    #[test]
    fn oov_word_maps_to_unk_in_place() {
        let v = Vocab::from_tokens(["storm", "damage"]);
        let ws = words("storm zzz damage");
        let t = tokenize_words(&ws, &v).unwrap();
        let unk: Vec<usize> = (0..t.n()).filter(|&j| t.token_ids[j + 1] == UNK).collect();
        assert_eq!(unk.len(), 1);
        assert_eq!(ws[t.word_of(unk[0])], "zzz");
        // alignment covers every word exactly once
        assert_eq!(t.word_spans().len(), ws.len());
    }

    #[test]
    fn empty_text_is_rejected() {
        let v = Vocab::new();
        assert!(tokenize(&preprocess("@someone https://t.co/x"), &v).is_err());
        assert!(tokenize("   ", &v).is_err());
    }

    #[test]
    fn preprocess_strips_mentions_and_urls() {
        assert_eq!(
            preprocess("RT @user Tree DOWN http://x.co/a www.site.org now"),
            "rt tree down now"
        );
    }

    #[test]
    fn long_words_split_into_chunks() {
        assert_eq!(split_word("abcdefghijklmnop"), vec!["abcdefghijkl", "mnop"]);
        assert_eq!(split_word("abcdefghijkl"), vec!["abcdefghijkl"]);
    }

    #[test]
    fn split_word_labels_inherit() {
        let v = Vocab::from_tokens(["abcdefghijkl", "mn", "x"]);
        let t = tokenize_words(&words("abcdefghijklmn x"), &v).unwrap();
        assert_eq!(word_labels_to_token_labels(&[1, 0], &t).unwrap(), vec![0, 1, 1, 0]);
        assert_eq!(word_labels_to_token_labels(&[0, 0], &t).unwrap(), vec![0, 0, 0, 0]);
        assert!(word_labels_to_token_labels(&[1], &t).is_err());
    }

    fn word_strategy() -> impl Strategy<Value = String> {
        "[a-z]{1,30}"
    }

    proptest! {
        #[test]
        fn word_index_is_monotone_and_covering(ws in prop::collection::vec(word_strategy(), 1..20)) {
            let t = tokenize_words(&ws, &Vocab::new()).unwrap();
            prop_assert_eq!(t.word_index[0], -1);
            prop_assert!(t.word_index[1..].windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(t.word_count(), ws.len());
            prop_assert_eq!(t.word_spans().len(), ws.len());
        }

        #[test]
        fn max_pool_recovers_word_labels(
            ws in prop::collection::vec(word_strategy(), 20..=20),
            labels in prop::collection::vec(0u8..=1, 20..=20),
        ) {
            let t = tokenize_words(&ws, &Vocab::new()).unwrap();
            let tl = word_labels_to_token_labels(&labels, &t).unwrap();
            // independent regrouping: walk tokens and take a per-word max
            let mut pooled = vec![0u8; ws.len()];
            for (pos, &w) in t.word_index.iter().enumerate() {
                if w >= 0 {
                    pooled[w as usize] = pooled[w as usize].max(tl[pos]);
                }
            }
            prop_assert_eq!(pooled, labels);
        }
    }
}
