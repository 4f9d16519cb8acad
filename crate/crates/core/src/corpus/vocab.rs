use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::VocabId;

/// Surface forms of the reserved ids, in id order.
pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bijection between tokens and ids. Ids below [`VocabId::NUM_RESERVED`]
/// are the reserved tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, VocabId>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocab {
    /// `tokens` must start with the reserved tokens and hold no duplicates.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS.len() || tokens.iter().zip(RESERVED_TOKENS).any(|(a, b)| a != b) {
            return Err(Error::Format(format!("vocabulary must start with {RESERVED_TOKENS:?}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), VocabId(i as u32)).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> VocabId {
        self.index.get(token).copied().unwrap_or(VocabId::UNK)
    }

    pub fn token(&self, id: VocabId) -> Option<&str> {
        self.tokens.get(id.index()).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<VocabId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Token strings; ids outside the vocabulary become `<unk>`.
    pub fn decode(&self, ids: &[VocabId]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED_TOKENS[VocabId::UNK.index()]).to_string())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&VocabFile { tokens: self.tokens.clone() }).expect("strings serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(s)?;
        Self::from_tokens(f.tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Keeps the `cap` most frequent tokens of `sequences`, ties broken
/// lexicographically, after the reserved tokens.
pub fn build_vocab<'a, I, S>(sequences: I, cap: usize) -> Vocab
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for seq in sequences {
        for t in seq {
            *counts.entry(t.as_ref()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, u64)> = counts
        .into_iter()
        .filter(|(t, _)| !RESERVED_TOKENS.contains(t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(cap);
    let tokens = RESERVED_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
        .collect();
    Vocab::from_tokens(tokens).expect("reserved prefix and unique tokens")
}
