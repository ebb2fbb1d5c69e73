//! The single JSON run configuration. Missing sections and fields take their
//! defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::ModelShape;
use crate::error::{Error, Result};
use crate::inference::DecodeConfig;
use crate::testbed::{AblationSettings, GapSpec, ToyEmbedder};
use crate::train::TrainConfig;
use crate::vocab::Languages;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptSettings {
    /// Bank size limit.
    pub cap: usize,
    /// Longest phrase kept, in tokens.
    pub max_len: usize,
    /// Stopword file, one word per line; built-in list when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stopwords: Option<PathBuf>,
}

impl Default for ConceptSettings {
    fn default() -> Self {
        ConceptSettings {
            cap: 1000,
            max_len: 3,
            stopwords: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSettings {
    pub min_count: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_size: Option<usize>,
    /// A fixed vocabulary file used instead of building one from the corpus.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

impl Default for VocabSettings {
    fn default() -> Self {
        VocabSettings {
            min_count: 1,
            max_size: None,
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub languages: Vec<String>,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub embedder: ToyEmbedder,
    pub concepts: ConceptSettings,
    pub vocab: VocabSettings,
    pub gap: GapSpec,
    pub ablation: AblationSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            languages: vec!["en".into()],
            model: ModelShape::base(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            embedder: ToyEmbedder::default(),
            concepts: ConceptSettings::default(),
            vocab: VocabSettings::default(),
            gap: GapSpec::default(),
            ablation: AblationSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        Languages::new(self.languages.clone())?;
        self.train.validate()?;
        self.decode.validate()?;
        self.gap.validate()?;
        if self.embedder.dim == 0 {
            return Err(Error::Argument("embedder dimension must be positive".into()));
        }
        if self.concepts.cap == 0 || self.concepts.max_len == 0 {
            return Err(Error::Argument("concept cap and max_len must be positive".into()));
        }
        Ok(())
    }

    pub fn languages(&self) -> Result<Languages> {
        Languages::new(self.languages.clone())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Argument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Argument(m) => Error::Argument(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
