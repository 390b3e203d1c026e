use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::datagen::vocab;
use crate::error::{Error, Result};
use crate::types::TokenId;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const IMG: TokenId = 3;
pub const RET: TokenId = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<img>", "<ret>"];

/// Whole-word tokenizer over a closed vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    words: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Tokenizer {
    /// Specials first (fixed ids 0..5), then the corpus word set.
    pub fn micro_cor() -> Self {
        let words = SPECIALS
            .iter()
            .copied()
            .chain(vocab::all_words())
            .map(String::from)
            .collect();
        Self::from_words(words).expect("built-in vocabulary is duplicate-free")
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()] != SPECIALS {
            return Err(Error::contract("vocabulary must start with the special tokens"));
        }
        let mut ids = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::contract(format!("invalid vocabulary entry {w:?}")));
            }
            if ids.insert(w.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary entry {w}")));
            }
        }
        Ok(Self { words, ids })
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.ids
            .get(word)
            .copied()
            .ok_or_else(|| Error::contract(format!("out-of-vocabulary word {word:?}")))
    }

    pub fn word(&self, id: TokenId) -> Result<&str> {
        self.words.get(id).map(String::as_str).ok_or(Error::Index {
            what: "vocabulary",
            index: id,
            size: self.words.len(),
        })
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let words = ids.iter().map(|&i| self.word(i)).collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.words.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_words(text.lines().map(String::from).collect())
    }
}
