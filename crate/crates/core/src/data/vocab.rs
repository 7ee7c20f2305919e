use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Closed whitespace vocabulary. Ids `0..4` are reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in RESERVED.iter().map(|s| s.to_string()).chain(words.into_iter().map(Into::into)) {
            vocab.push(w)?;
        }
        Ok(vocab)
    }

    fn push(&mut self, word: String) -> Result<u32> {
        if word.is_empty() || word.chars().any(char::is_whitespace) {
            return Err(Error::Dataset(format!("invalid token {word:?}")));
        }
        if self.index.contains_key(&word) {
            return Err(Error::Dataset(format!("duplicate token {word:?}")));
        }
        let id = self.tokens.len() as u32;
        self.index.insert(word.clone(), id);
        self.tokens.push(word);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or(RESERVED[UNK as usize], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Unknown words map to `UNK`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Deterministic pronounceable word for `index`, built from `syllables`
/// consonant-vowel pairs. Distinct indices below `70^syllables` give
/// distinct words.
pub fn syllable_word(index: usize, syllables: u32) -> String {
    let base = CONSONANTS.len() * VOWELS.len();
    let space = base.pow(syllables);
    // Scatter consecutive indices; 7919 is coprime with 70.
    let mut x = (index % space) * 7919 % space;
    let mut out = String::with_capacity(2 * syllables as usize);
    for _ in 0..syllables {
        let s = x % base;
        x /= base;
        out.push(CONSONANTS[s / VOWELS.len()] as char);
        out.push(VOWELS[s % VOWELS.len()] as char);
    }
    out
}

pub fn capitalize(word: &str) -> String {
    let mut c = word.chars();
    match c.next() {
        Some(f) => f.to_ascii_uppercase().to_string() + c.as_str(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn reserved_ids() {
        let v = Vocab::new(["a", "b"]).unwrap();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn tokenize_round_trip_and_fallback() {
        let v = Vocab::new(["x", "y"]).unwrap();
        assert_eq!(v.tokenize(""), Vec::<u32>::new());
        assert_eq!(v.tokenize("x zzz"), vec![4, UNK]);
        let ids = v.tokenize("<bos> x y <eos>");
        assert_eq!(v.detokenize(&ids), "<bos> x y <eos>");
    }

    #[test]
    fn duplicates_rejected() {
        assert!(Vocab::new(["a", "a"]).is_err());
        assert!(Vocab::new(["<pad>"]).is_err());
    }

    #[test]
    fn syllable_words_are_distinct() {
        let words: HashSet<String> = (0..4900).map(|i| syllable_word(i, 2)).collect();
        assert_eq!(words.len(), 4900);
        assert_eq!(syllable_word(3, 3).len(), 6);
        assert_eq!(capitalize("tomi"), "Tomi");
    }
}
