use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const START: &str = "<start>";
pub const END: &str = "<end>";
pub const UNK: &str = "<unk>";

pub const START_ID: usize = 0;
pub const END_ID: usize = 1;
pub const UNK_ID: usize = 2;

const RESERVED: [&str; 3] = [START, END, UNK];

/// Token/index bijection with the three reserved tokens at indices 0..=2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit token list (reserved tokens are
    /// prepended and must not appear in `tokens`).
    pub fn from_tokens(tokens: Vec<String>, min_count: usize) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        Vocabulary::from_full_list(all, min_count)
    }

    /// Rebuilds a vocabulary from its complete index-ordered token list, as
    /// stored in embedding files.
    pub fn from_full_list(tokens: Vec<String>, min_count: usize) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..3] != RESERVED {
            return Err(Error::Data(
                "vocabulary must begin with <start>, <end>, <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            min_count,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, falling back to `<unk>`.
    pub fn encode(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn decode(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// `<start> w1 .. wn <end>` as indices.
    pub fn encode_caption<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        let mut out = Vec::with_capacity(words.len() + 2);
        out.push(START_ID);
        out.extend(words.iter().map(|w| self.encode(w.as_ref())));
        out.push(END_ID);
        out
    }

    /// Stable 64-bit digest of the index-ordered token list.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update((t.len() as u32).to_le_bytes());
            h.update(t.as_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Builds a vocabulary from tokenized captions. Tokens seen fewer than
/// `min_count` times map to `<unk>`. Kept tokens are ordered by descending
/// frequency, ties broken lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Vocabulary> {
    if corpus.iter().all(|c| c.is_empty()) {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for caption in corpus {
        for t in caption {
            let t = t.as_ref();
            if !RESERVED.contains(&t) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count.max(1))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()).collect(), min_count)
}
