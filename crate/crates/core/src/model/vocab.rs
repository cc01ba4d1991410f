use std::collections::{BTreeSet, HashMap};

use super::ModelError;
use crate::text::{join_words, split_words};

pub type TokenId = u32;

pub const SPECIAL_TOKENS: [&str; 9] = ["[PAD]", "[UNK]", "[BOS]", "[EOS]", "[ENT]", "[SUM]", "[SEP]", "[USR]", "[SYS]"];

/// Ids of the reserved tokens; they always occupy the first slots of a vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Specials {
    pub pad: TokenId,
    pub unk: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub ent: TokenId,
    pub sum: TokenId,
    pub sep: TokenId,
    pub usr: TokenId,
    pub sys: TokenId,
}

pub const SPECIALS: Specials = Specials { pad: 0, unk: 1, bos: 2, eos: 3, ent: 4, sum: 5, sep: 6, usr: 7, sys: 8 };

impl Specials {
    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < SPECIAL_TOKENS.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Specials first, then every distinct word of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for text in texts {
            for w in split_words(text) {
                if !SPECIAL_TOKENS.contains(&w.as_str()) {
                    words.insert(w);
                }
            }
        }
        let tokens = SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, ModelError> {
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(ModelError::InvalidVocab(format!("slot {i} must hold {s}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(ModelError::InvalidVocab(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn specials(&self) -> Specials {
        SPECIALS
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.index.get(word).copied().unwrap_or(SPECIALS.unk)
    }

    pub fn get(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or("[UNK]", String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(self, text)
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        detokenize(self, ids)
    }

    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Vec<TokenId> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }
}

pub fn tokenize(vocab: &Vocab, text: &str) -> Vec<TokenId> {
    split_words(text).iter().map(|w| vocab.id(w)).collect()
}

pub fn detokenize(vocab: &Vocab, ids: &[TokenId]) -> String {
    let words: Vec<&str> = ids.iter().map(|&i| vocab.token(i)).collect();
    join_words(&words)
}
