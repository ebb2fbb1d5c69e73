//! Checkpoint directories: `manifest.json`, `weights.mcw` (f64 weights),
//! `vocab.json` and the concept bank as `bank.mce1`.
//!
//! The weight file is laid out like MCE1 but stores 64-bit floats: magic
//! `MCW1`, `u32` tensor count, `u64` scalar count, the scalars, then a `u64`
//! byte length and a JSON array of `{name, shape, offset}`.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mce1::{read_exact, EmbeddingFile};
use crate::autodiff::Tensor;
use crate::decoder::{DecoderConfig, DecoderParameters};
use crate::embedding::{Concept, ConceptBank};
use crate::error::{Error, Result};
use crate::vocab::{Languages, Vocabulary};

pub const WEIGHT_MAGIC: &[u8; 4] = b"MCW1";
pub const FORMAT: &str = "multicap-checkpoint/1";
const FILES: [&str; 4] = ["manifest.json", "weights.mcw", "vocab.json", "bank.mce1"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn write_weights<W: Write>(params: &DecoderParameters, mut w: W) -> Result<()> {
    let total = params.num_scalars();
    w.write_all(WEIGHT_MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    w.write_all(&(total as u64).to_le_bytes())?;
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0;
    let mut buf = Vec::with_capacity(total * 8);
    for (name, t) in params.named() {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    let trailer = serde_json::to_vec(&entries)?;
    w.write_all(&(trailer.len() as u64).to_le_bytes())?;
    w.write_all(&trailer)?;
    Ok(())
}

pub fn read_weights<R: Read>(config: DecoderConfig, mut r: R) -> Result<DecoderParameters> {
    let mut head = [0u8; 16];
    read_exact(&mut r, &mut head)?;
    if &head[..4] != WEIGHT_MAGIC {
        return Err(Error::Data("bad magic, expected MCW1".into()));
    }
    let count = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) as usize;
    let total = usize::try_from(u64::from_le_bytes(head[8..16].try_into().expect("8 bytes")))
        .map_err(|_| Error::Data("weight file too large".into()))?;
    let mut bytes = vec![
        0u8;
        total
            .checked_mul(8)
            .ok_or_else(|| Error::Data("weight count overflows".into()))?
    ];
    read_exact(&mut r, &mut bytes)?;
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut len = [0u8; 8];
    read_exact(&mut r, &mut len)?;
    let mut trailer = vec![0u8; u64::from_le_bytes(len) as usize];
    read_exact(&mut r, &mut trailer)?;
    let entries: Vec<TensorEntry> =
        serde_json::from_slice(&trailer).map_err(|e| Error::Data(format!("weight trailer: {e}")))?;
    if entries.len() != count {
        return Err(Error::Data(format!(
            "weight trailer lists {} tensors, header {count}",
            entries.len()
        )));
    }
    let mut named = Vec::with_capacity(count);
    for e in entries {
        let n: usize = e.shape.iter().product();
        let slice = data
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Data(format!("tensor {:?} extends past the weight data", e.name)))?;
        named.push((e.name, Tensor::new(e.shape, slice.to_vec())?));
    }
    DecoderParameters::from_named(config, named)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config: DecoderConfig,
    pub vocab_fingerprint: String,
    pub languages: Languages,
    pub k_prompts: usize,
    pub step: u64,
    pub seed: u64,
    pub weights_sha256: String,
}

/// A trained captioner with everything needed to decode.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: DecoderParameters,
    pub vocab: Vocabulary,
    pub languages: Languages,
    pub bank: ConceptBank,
    pub k_prompts: usize,
    pub step: u64,
    pub seed: u64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::file(path, e))
}

pub fn bank_to_mce1(bank: &ConceptBank) -> Result<EmbeddingFile> {
    let ids = bank.concepts().iter().map(|c| c.surface.clone()).collect();
    let feats: Vec<_> = bank.concepts().iter().map(|c| c.feature.clone()).collect();
    if feats.is_empty() {
        return EmbeddingFile::new(bank.dim(), ids, Vec::new());
    }
    EmbeddingFile::from_unit_vectors(ids, &feats)
}

pub fn bank_from_mce1(file: &EmbeddingFile) -> Result<ConceptBank> {
    let (feats, _) = file.unit_vectors()?;
    let concepts = file
        .ids()
        .iter()
        .zip(feats)
        .map(|(s, feature)| Concept {
            surface: s.clone(),
            feature,
        })
        .collect();
    ConceptBank::new(file.dim(), concepts)
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        if self.vocab.len() != self.params.config().vocab_size {
            return Err(Error::Vocabulary(format!(
                "vocabulary of {} tokens for a decoder of {}",
                self.vocab.len(),
                self.params.config().vocab_size
            )));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let mut weights = Vec::new();
        write_weights(&self.params, &mut weights)?;
        let manifest = Manifest {
            format: FORMAT.into(),
            config: self.params.config().clone(),
            vocab_fingerprint: self.vocab.fingerprint(),
            languages: self.languages.clone(),
            k_prompts: self.k_prompts,
            step: self.step,
            seed: self.seed,
            weights_sha256: sha256_hex(&weights),
        };
        let mut vocab = Vec::new();
        self.vocab.write(&mut vocab)?;
        let mut bank = Vec::new();
        bank_to_mce1(&self.bank)?.write(&mut bank)?;
        write_file(&dir.join("weights.mcw"), &weights)?;
        write_file(&dir.join("vocab.json"), &vocab)?;
        write_file(&dir.join("bank.mce1"), &bank)?;
        write_file(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&read_file(&dir.join("manifest.json"))?)
            .map_err(|e| Error::Data(format!("{}: {e}", dir.join("manifest.json").display())))?;
        if manifest.format != FORMAT {
            return Err(Error::Data(format!(
                "unsupported checkpoint format {:?}",
                manifest.format
            )));
        }
        let weights = read_file(&dir.join("weights.mcw"))?;
        if sha256_hex(&weights) != manifest.weights_sha256 {
            return Err(Error::Data("weight file does not match its manifest hash".into()));
        }
        let vocab = Vocabulary::read(read_file(&dir.join("vocab.json"))?.as_slice())?;
        if vocab.fingerprint() != manifest.vocab_fingerprint {
            return Err(Error::Vocabulary(
                "vocab.json does not match the manifest fingerprint".into(),
            ));
        }
        let params = read_weights(manifest.config.clone(), weights.as_slice())?;
        let bank = bank_from_mce1(&EmbeddingFile::read(read_file(&dir.join("bank.mce1"))?.as_slice())?)?;
        Ok(Checkpoint {
            params,
            vocab,
            languages: manifest.languages,
            bank,
            k_prompts: manifest.k_prompts,
            step: manifest.step,
            seed: manifest.seed,
        })
    }

    /// Fails unless `vocab` is the vocabulary this checkpoint was trained with.
    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.fingerprint() != self.vocab.fingerprint() {
            return Err(Error::Vocabulary(format!(
                "corpus vocabulary {} does not match checkpoint vocabulary {}",
                &vocab.fingerprint()[..12],
                &self.vocab.fingerprint()[..12]
            )));
        }
        Ok(())
    }
}

/// SHA-256 over the checkpoint files in a fixed order.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in FILES {
        let bytes = read_file(&dir.join(name))?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn checkpoint_files(dir: &Path) -> Vec<PathBuf> {
    FILES.iter().map(|f| dir.join(f)).collect()
}
