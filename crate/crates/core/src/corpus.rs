//! Caption corpora: JSON Lines records with whitespace tokenization.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// NFC-normalizes `text` and splits it on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let normalized: String = text.nfc().collect();
    normalized.split_whitespace().map(str::to_owned).collect()
}

/// One corpus entry: the source text `S`, an optional target `T` in the
/// output language, and the language the decoder should write in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionRecord {
    pub id: String,
    pub source: Vec<String>,
    pub target: Option<Vec<String>>,
    pub lang: String,
}

impl CaptionRecord {
    pub fn new(id: impl Into<String>, source: &str, lang: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let source = tokenize(source);
        if source.is_empty() {
            return Err(Error::Data(format!("record {id:?} has an empty source")));
        }
        Ok(CaptionRecord {
            id,
            source,
            target: None,
            lang: lang.into(),
        })
    }

    pub fn with_target(mut self, target: &str) -> Result<Self> {
        let t = tokenize(target);
        if t.is_empty() {
            return Err(Error::Data(format!("record {:?} has an empty target", self.id)));
        }
        self.target = Some(t);
        Ok(self)
    }

    /// Tokens the decoder is trained to produce: `T` when present, else `S`.
    pub fn output_tokens(&self) -> &[String] {
        self.target.as_deref().unwrap_or(&self.source)
    }

    pub fn source_text(&self) -> String {
        self.source.join(" ")
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<String>,
    lang: String,
}

/// Parses a JSON Lines corpus. Records without an `id` are named by their
/// zero-based record number. Every `lang` must appear in `languages`.
pub fn read_corpus<R: BufRead>(reader: R, languages: &[String]) -> Result<Vec<CaptionRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RecordLine =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("corpus line {}: {e}", lineno + 1)))?;
        if !languages.contains(&raw.lang) {
            return Err(Error::Data(format!(
                "corpus line {}: language {:?} is not one of {languages:?}",
                lineno + 1,
                raw.lang
            )));
        }
        let id = raw.id.unwrap_or_else(|| records.len().to_string());
        let mut rec = CaptionRecord::new(id, &raw.source, raw.lang)
            .map_err(|e| Error::Data(format!("corpus line {}: {e}", lineno + 1)))?;
        if let Some(t) = raw.target {
            rec = rec.with_target(&t)?;
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::EmptyInput("corpus has no records".into()));
    }
    Ok(records)
}

pub fn load_corpus(path: &Path, languages: &[String]) -> Result<Vec<CaptionRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    read_corpus(std::io::BufReader::new(f), languages)
}

pub fn write_corpus<W: Write>(mut w: W, records: &[CaptionRecord]) -> Result<()> {
    for r in records {
        let line = RecordLine {
            id: Some(r.id.clone()),
            source: r.source.join(" "),
            target: r.target.as_ref().map(|t| t.join(" ")),
            lang: r.lang.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w)?;
    }
    Ok(())
}
