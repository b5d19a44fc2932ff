//! Word vocabulary and caption tokenization.
//!
//! Tokenization lowercases, drops punctuation characters and splits on
//! whitespace. Ids 0..3 are reserved for PAD/BOS/EOS/UNK; remaining ids are
//! assigned by descending corpus frequency with lexicographic tie-break.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
const NUM_SPECIALS: usize = 4;
const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ids of one caption; never empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Caption {
    pub ids: Vec<usize>,
}

impl Caption {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .filter_map(|w| {
            let cleaned: String = w.chars().filter(|c| c.is_alphanumeric()).collect();
            if cleaned.is_empty() {
                None
            } else {
                Some(cleaned)
            }
        })
        .collect()
}

/// Count token frequencies over a corpus and assign ids.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for caption in corpus {
        for token in normalize(caption.as_ref()) {
            *counts.entry(token).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(String, usize)> =
        counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    kept.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
    Ok(Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t)))
}

impl Vocabulary {
    /// Build from non-special tokens already in id order.
    pub fn from_words(tokens: impl IntoIterator<Item = String>) -> Self {
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let token_to_id =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { token_to_id, id_to_token }
    }

    /// Total number of ids, specials included.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Non-special tokens in id order, as serialized.
    pub fn words(&self) -> &[String] {
        &self.id_to_token[NUM_SPECIALS..]
    }

    /// One token per line; line number equals id minus the four implicit
    /// specials.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for w in self.words() {
            out.push_str(w);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line != line.trim() || line.contains(char::is_whitespace) {
                return Err(Error::Format(format!(
                    "vocabulary line {} is not a single bare token",
                    i + 1
                )));
            }
        }
        Ok(Self::from_tokens(text.lines().map(str::to_string)))
    }
}

/// Map caption text to token ids, with unknown words falling back to UNK.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Caption> {
    let tokens = normalize(text);
    if tokens.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "caption {text:?} is empty after normalization"
        )));
    }
    let ids = tokens.iter().map(|t| vocab.id(t).unwrap_or(UNK_ID)).collect();
    Ok(Caption { ids })
}

/// Inverse of `tokenize` at the token level.
pub fn detokenize(caption: &Caption, vocab: &Vocabulary) -> String {
    caption
        .ids
        .iter()
        .map(|&id| vocab.token(id).unwrap_or(SPECIAL_TOKENS[UNK_ID]))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = build_vocab(&["a a b"], 1).unwrap();
        assert_eq!(v.len(), 6);
        assert!(v.id("a").unwrap() < v.id("b").unwrap());
        assert_eq!(v.id("a"), Some(4));
    }

    #[test]
    fn min_count_filters_to_unk() {
        let v = build_vocab(&["x"], 2).unwrap();
        assert_eq!(v.len(), 4);
        let c = tokenize("x", &v).unwrap();
        assert_eq!(c.ids, vec![UNK_ID]);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(build_vocab::<&str>(&[], 1).is_err());
    }

    #[test]
    fn tokenize_caption_text() {
        let v = build_vocab(&["the digit 3 is at the bottom of the digit 0"], 1).unwrap();
        let c = tokenize("The digit 3", &v).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.ids, vec![v.id("the").unwrap(), v.id("digit").unwrap(), v.id("3").unwrap()]);
    }

    #[test]
    fn unknown_word_with_punctuation_is_one_unk() {
        let v = build_vocab(&["a b"], 1).unwrap();
        let c = tokenize("zzz-unknown", &v).unwrap();
        assert_eq!(c.ids, vec![UNK_ID]);
    }

    #[test]
    fn double_space_collapses() {
        let v = build_vocab(&["a b"], 1).unwrap();
        let c = tokenize("A  B", &v).unwrap();
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn empty_after_normalization_rejected() {
        let v = build_vocab(&["a"], 1).unwrap();
        assert!(tokenize("!!! ...", &v).is_err());
    }

    #[test]
    fn roundtrip_in_vocabulary_text() {
        let v = build_vocab(&["the digit 7 is alone"], 1).unwrap();
        let text = "the digit 7 is alone";
        let c = tokenize(text, &v).unwrap();
        assert_eq!(detokenize(&c, &v), text);
    }

    #[test]
    fn save_load_preserves_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = build_vocab(&["b a a c c c"], 1).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
        assert_eq!(loaded.id("c"), Some(4));
    }
}
