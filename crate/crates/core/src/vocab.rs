//! Output vocabulary and language table.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CaptionRecord;
use crate::decoder::{BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};

pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token list with the four special tokens at ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() <= SPECIALS.len() {
            return Err(Error::EmptyVocabulary);
        }
        if tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::Vocabulary(format!("vocabulary must start with {SPECIALS:?}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Output tokens seen at least `min_count` times, most frequent first,
    /// ties in lexicographic order, keeping at most `max_size` of them.
    pub fn build(records: &[CaptionRecord], min_count: u64, max_size: Option<usize>) -> Result<Self> {
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for r in records {
            for t in r.output_tokens() {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !SPECIALS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        if let Some(cap) = max_size {
            ranked.truncate(cap);
        }
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens)
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

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Text tokens for `ids`, stopping at EOS and skipping PAD and BOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.tokens.get(i).cloned().unwrap_or_else(|| SPECIALS[UNK].to_string()))
            .collect()
    }

    /// Hex SHA-256 over the length-prefixed token list.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.tokens.len() as u64).to_le_bytes());
        for t in &self.tokens {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(
            w,
            &VocabFile {
                tokens: self.tokens.clone(),
            },
        )?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let f: VocabFile = serde_json::from_reader(r)?;
        Self::from_tokens(f.tokens)
    }
}

/// Output languages in a fixed order; the position is the language id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Languages(Vec<String>);

impl Languages {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Argument("at least one language is required".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Argument(format!("language {n:?} listed twice")));
            }
        }
        Ok(Languages(names))
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.0
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Data(format!("unknown language {name:?}")))
    }
}
