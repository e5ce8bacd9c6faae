use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{DataError, RefSample, Split};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Lowercase, treat every non-alphanumeric character as a separator.
pub fn tokenize(expression: &str) -> Vec<String> {
    expression
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Tokens ordered by descending frequency, ties lexicographic. Tokens seen
    /// fewer than `min_count` times map to UNK.
    pub fn build<'a>(expressions: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for e in expressions {
            for t in tokenize(e) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = [PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()].into_iter().chain(ranked.into_iter().map(|(t, _)| t)).collect();
        Self::from_tokens(tokens).expect("fresh vocabulary is well formed")
    }

    /// Vocabulary over the train split only.
    pub fn from_train_samples(samples: &[RefSample]) -> Self {
        Self::build(samples.iter().filter(|s| s.split == Split::Train).map(|s| s.expression.as_str()), 1)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN) || tokens.get(1).map(String::as_str) != Some(UNK_TOKEN) {
            return Err(format!("vocabulary must start with {PAD_TOKEN} and {UNK_TOKEN}"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate vocabulary token {t:?}"));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;
    fn try_from(tokens: Vec<String>) -> Result<Self, String> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub indices: Vec<usize>,
    pub valid_len: usize,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.indices.len()
    }

    /// 1 at valid positions, 0 at padding.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.indices.len()).map(|i| i < self.valid_len).collect()
    }
}

pub fn encode_expression(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence, DataError> {
    if tokens.is_empty() || max_len == 0 {
        return Err(DataError::EmptyExpression);
    }
    let valid_len = tokens.len().min(max_len);
    let mut indices = vec![PAD; max_len];
    for (slot, t) in indices.iter_mut().zip(tokens) {
        *slot = vocab.index_of(t);
    }
    Ok(TokenSequence { indices, valid_len })
}
