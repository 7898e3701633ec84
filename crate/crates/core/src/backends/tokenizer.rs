//! Whitespace word tokenizer with a closed vocabulary.

use std::collections::HashMap;

use super::{TokenId, Tokenizer};

pub const PAD_TOKEN: &str = "<pad>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, PartialEq)]
pub struct WordTokenizer {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl WordTokenizer {
    pub const PAD: TokenId = 0;
    pub const EOS: TokenId = 1;
    pub const UNK: TokenId = 2;

    /// Builds the vocabulary from text, in order of first appearance.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tok = Self {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in [PAD_TOKEN, EOS_TOKEN, UNK_TOKEN] {
            tok.push(w.to_string());
        }
        for text in texts {
            for w in text.split_whitespace() {
                tok.push(w.to_lowercase());
            }
        }
        tok
    }

    fn push(&mut self, word: String) {
        if !self.index.contains_key(&word) {
            self.index.insert(word.clone(), self.words.len() as TokenId);
            self.words.push(word);
        }
    }

    pub fn token_id(&self, word: &str) -> Option<TokenId> {
        self.index.get(&word.to_lowercase()).copied()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

impl Tokenizer for WordTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| self.token_id(w).unwrap_or(Self::UNK))
            .collect()
    }

    fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| id > Self::UNK)
            .filter_map(|&id| self.words.get(id as usize))
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn vocab_size(&self) -> usize {
        self.words.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_specials() {
        let t = WordTokenizer::from_texts(["Transcribe speech to text", "bako tumi"]);
        assert_eq!(t.vocab_size(), 9);
        assert_eq!(t.token_id("text"), Some(6));
        let ids = t.encode("bako  TUMI zzz");
        assert_eq!(ids, vec![7, 8, WordTokenizer::UNK]);
        assert_eq!(
            t.decode(&[7, WordTokenizer::EOS, 8, WordTokenizer::PAD]),
            "bako tumi"
        );
        assert_eq!(t.decode(&t.encode("to text")), "to text");
    }
}
