//! Tokenization and the closed word vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, IoContext, Result};

pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

/// Lowercases and splits on whitespace and punctuation. Punctuation is dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() && c != '_') || c.is_ascii_control())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Word vocabulary with the four special tokens at ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const UNK_ID: usize = 0;
    pub const MASK_ID: usize = 1;
    pub const CLS_ID: usize = 2;
    pub const SEP_ID: usize = 3;
    /// Number of special tokens; ordinary words start here.
    pub const SPECIALS: usize = 4;

    /// Specials followed by every distinct word, sorted.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a [String]>) -> Self {
        let distinct: BTreeSet<&str> = texts.into_iter().flatten().map(String::as_str).collect();
        let words = [UNK, MASK, CLS, SEP]
            .into_iter()
            .chain(distinct.into_iter().filter(|w| ![UNK, MASK, CLS, SEP].contains(w)))
            .map(String::from)
            .collect();
        Self::from_words(words)
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.words.join("\n");
        s.push('\n');
        std::fs::write(path, s).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).at(path)?;
        let words: Vec<String> = s.lines().map(String::from).collect();
        if words.len() < 4 || words[..4] != [UNK, MASK, CLS, SEP] {
            return Err(Error::Format {
                file: path.display().to_string(),
                line: 1,
                msg: "vocabulary must start with the special tokens".into(),
            });
        }
        Ok(Self::from_words(words))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize("Brain MRI, shows: a lesion."),
            vec!["brain", "mri", "shows", "a", "lesion"]
        );
        assert!(tokenize("  ,. ").is_empty());
    }

    #[test]
    fn vocab_specials_and_unknowns() {
        let t = tokenize("b a c a");
        let v = Vocab::build([t.as_slice()]);
        assert_eq!(v.len(), 7);
        assert_eq!(v.word(Vocab::MASK_ID), Some(MASK));
        assert_eq!(v.encode(&tokenize("a zzz")), vec![4, Vocab::UNK_ID]);
    }
}
