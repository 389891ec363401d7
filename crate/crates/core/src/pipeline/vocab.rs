use std::collections::HashMap;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

/// Dense bijection between tokens and ids `0..len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Builds a vocabulary from whitespace-tokenized text with one sentence per
/// line. Ids follow first occurrence; an end-of-sentence marker is counted
/// at the end of every line, and `<unk>` is appended if the text never
/// contains it.
pub fn build_vocab(text: &str) -> Result<Vocabulary> {
    if text.split_whitespace().next().is_none() {
        return Err(Error::EmptyCorpus);
    }
    let mut vocab = Vocabulary { tokens: Vec::new(), index: HashMap::new() };
    for line in text.lines() {
        for token in line.split_whitespace() {
            vocab.insert(token);
        }
        vocab.insert(EOS);
    }
    vocab.insert(UNK);
    Ok(vocab)
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, token) in tokens.iter().enumerate() {
            if index.insert(token.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token '{token}'")));
            }
        }
        if !index.contains_key(UNK) {
            return Err(Error::Config(format!("vocabulary lacks {UNK}")));
        }
        Ok(Vocabulary { tokens, index })
    }

    fn insert(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
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

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn unk_id(&self) -> usize {
        self.index[UNK]
    }

    /// Encodes text line by line, appending the end-of-sentence id after each
    /// line. Unknown tokens map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let unk = self.unk_id();
        let eos = self.id(EOS);
        let mut ids = Vec::new();
        for line in text.lines() {
            ids.extend(line.split_whitespace().map(|t| self.id(t).unwrap_or(unk)));
            ids.push(eos.unwrap_or(unk));
        }
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<&str>> {
        ids.iter()
            .enumerate()
            .map(|(position, &id)| {
                self.token(id).ok_or(Error::Index {
                    what: "token id",
                    index: id,
                    limit: self.len(),
                    position,
                })
            })
            .collect()
    }
}
