use std::collections::HashMap;

use super::Example;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token to index map with padding at 0 and unknown at 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Rebuilds a vocabulary from its ordered token list (index = position).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
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

    pub fn encode(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn decode(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

/// Counts text and condition tokens; keeps those seen at least `min_freq`
/// times, ordered by descending frequency then token.
pub fn build_vocab<'a>(
    datasets: impl IntoIterator<Item = &'a [Example]>,
    min_freq: usize,
) -> Vocab {
    let min_freq = min_freq.max(1);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for ds in datasets {
        for ex in ds {
            for tok in ex.text.iter().chain(&ex.condition) {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_freq && t != PAD_TOKEN && t != UNK_TOKEN)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let tokens = [PAD_TOKEN, UNK_TOKEN]
        .into_iter()
        .chain(kept.into_iter().map(|(t, _)| t))
        .map(str::to_string)
        .collect();
    Vocab::from_tokens(tokens)
}
