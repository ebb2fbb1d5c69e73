//! Visual-concept vocabulary: frequent stopword-bounded phrases of a caption
//! corpus, embedded verbatim into a [`ConceptBank`].

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::corpus::CaptionRecord;
use crate::embedding::{Concept, ConceptBank, TextEmbedder};
use crate::error::{Error, Result};

pub const DEFAULT_CAP: usize = 1000;
pub const DEFAULT_MAX_LEN: usize = 3;

const EN_STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "of", "in", "on", "at", "to", "for", "with", "by", "from", "into", "onto",
    "over", "under", "near", "next", "behind", "beside", "between", "through", "up", "down", "out", "off", "about",
    "around", "while", "as", "is", "are", "was", "were", "be", "been", "being", "has", "have", "had", "do", "does",
    "did", "it", "its", "he", "she", "they", "them", "their", "his", "her", "this", "that", "these", "those", "there",
    "here", "who", "which", "what", "some", "very", "other", "each", "one", "two", "three", "several", "many", "top",
    "front", "side",
];

const DE_STOPWORDS: &[&str] = &[
    "der", "die", "das", "den", "dem", "des", "ein", "eine", "einen", "einem", "einer", "eines", "und", "oder", "in",
    "im", "auf", "an", "am", "mit", "von", "vom", "zu", "zum", "zur", "bei", "aus", "neben", "vor", "hinter", "über",
    "unter", "ist", "sind", "wird", "werden", "sich", "er", "sie", "es", "ihr", "sein", "seine", "ihre",
];

const FR_STOPWORDS: &[&str] = &[
    "le",
    "la",
    "les",
    "l'",
    "un",
    "une",
    "des",
    "du",
    "de",
    "d'",
    "et",
    "ou",
    "dans",
    "sur",
    "sous",
    "avec",
    "à",
    "au",
    "aux",
    "en",
    "par",
    "pour",
    "près",
    "devant",
    "derrière",
    "est",
    "sont",
    "il",
    "elle",
    "ils",
    "elles",
    "se",
    "son",
    "sa",
    "ses",
    "leur",
    "qui",
    "que",
];

/// Shipped stopword list for a language id. Unknown languages get an empty
/// list, so every non-punctuation token run becomes a candidate.
pub fn default_stopwords(lang: &str) -> HashSet<String> {
    let list: &[&str] = match lang {
        "en" => EN_STOPWORDS,
        "de" => DE_STOPWORDS,
        "fr" => FR_STOPWORDS,
        _ => &[],
    };
    list.iter().map(|s| s.to_string()).collect()
}

pub fn read_stopwords<R: BufRead>(reader: R) -> Result<HashSet<String>> {
    let mut out = HashSet::new();
    for line in reader.lines() {
        let line = line?;
        let w = line.trim();
        if !w.is_empty() {
            out.insert(w.to_lowercase());
        }
    }
    Ok(out)
}

pub(crate) fn is_punctuation(token: &str) -> bool {
    token.chars().all(|c| !c.is_alphanumeric())
}

/// Ranked concept phrases with their corpus frequencies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptVocabulary {
    entries: Vec<(String, u64)>,
}

impl ConceptVocabulary {
    /// Wraps phrases that are already ranked, e.g. an externally chunked
    /// noun-phrase list. Frequencies become descending rank weights.
    pub fn from_ranked(phrases: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &phrases {
            if p.trim().is_empty() {
                return Err(Error::Data("empty concept phrase".into()));
            }
            if !seen.insert(p.as_str()) {
                return Err(Error::Data(format!("duplicate concept phrase {p:?}")));
            }
        }
        if phrases.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        let n = phrases.len() as u64;
        Ok(ConceptVocabulary {
            entries: phrases
                .into_iter()
                .enumerate()
                .map(|(i, p)| (p, n - i as u64))
                .collect(),
        })
    }

    pub fn entries(&self) -> &[(String, u64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn phrases(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(p, _)| p.as_str())
    }
}

/// Collects maximal runs of lowercased tokens that contain no stopword and
/// no punctuation token, keeps runs of at most `max_len` tokens, counts
/// every occurrence, and returns the `cap` most frequent phrases
/// (frequency descending, ties in lexicographic order). Phrases are drawn
/// from the source side of each record.
pub fn extract_concepts(
    corpus: &[CaptionRecord],
    cap: usize,
    stopwords: &HashSet<String>,
    max_len: usize,
) -> Result<ConceptVocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("concept extraction needs a corpus".into()));
    }
    if cap == 0 || max_len == 0 {
        return Err(Error::Argument("cap and max_len must be positive".into()));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for rec in corpus {
        let mut run: Vec<String> = Vec::new();
        let mut flush = |run: &mut Vec<String>| {
            if !run.is_empty() && run.len() <= max_len {
                *counts.entry(run.join(" ")).or_default() += 1;
            }
            run.clear();
        };
        for tok in &rec.source {
            let t = tok.to_lowercase();
            if is_punctuation(&t) || stopwords.contains(&t) {
                flush(&mut run);
            } else {
                run.push(t);
            }
        }
        flush(&mut run);
    }
    if counts.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    let mut entries: Vec<(String, u64)> = counts.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries.truncate(cap);
    Ok(ConceptVocabulary { entries })
}

/// Embeds each phrase with the identity template and keeps vocabulary order.
pub fn embed_concepts(vocab: &ConceptVocabulary, embedder: &dyn TextEmbedder) -> Result<ConceptBank> {
    let mut concepts = Vec::with_capacity(vocab.len());
    for phrase in vocab.phrases() {
        let tokens: Vec<String> = phrase.split_whitespace().map(str::to_owned).collect();
        let feature = embedder.embed(&tokens).map_err(|e| Error::Embed {
            phrase: phrase.to_owned(),
            source: Box::new(e),
        })?;
        concepts.push(Concept {
            surface: phrase.to_owned(),
            feature,
        });
    }
    ConceptBank::new(embedder.dim(), concepts)
}

/// Reads a concepts file: UTF-8, one phrase per line, blank lines skipped.
pub fn read_concepts<R: BufRead>(reader: R) -> Result<ConceptVocabulary> {
    let mut phrases = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let p = line.trim();
        if !p.is_empty() {
            phrases.push(p.to_owned());
        }
    }
    ConceptVocabulary::from_ranked(phrases)
}

pub fn load_concepts(path: &Path) -> Result<ConceptVocabulary> {
    let f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    read_concepts(std::io::BufReader::new(f))
}

pub fn write_concepts<W: Write>(mut w: W, vocab: &ConceptVocabulary) -> Result<()> {
    for p in vocab.phrases() {
        writeln!(w, "{p}")?;
    }
    Ok(())
}
