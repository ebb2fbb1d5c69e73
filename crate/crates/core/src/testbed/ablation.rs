//! Component ablation on the synthetic-gap testbed: text-only training on
//! some scenes, zero-shot captioning of the others from gapped features.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{synth_vision, GapSpec, ToyCorpus, ToyEmbedder};
use crate::concepts::{default_stopwords, embed_concepts, extract_concepts};
use crate::corpus::CaptionRecord;
use crate::decoder::{DecoderParameters, ModelShape};
use crate::embedding::{pool_frames, retrieve_prompts, ConceptBank, TextEmbedder, UnitVector};
use crate::error::{Error, Result};
use crate::inference::{caption_with, DecodeConfig};
use crate::metrics::{eval_tokenize, evaluate, EvalCorpus, EvalItem, EvalReport};
use crate::rng::SeedStreams;
use crate::train::{train, TrainConfig, TrainingSet};
use crate::vocab::{Languages, Vocabulary};

/// Which components are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub use_cp: bool,
    pub use_ia: bool,
    pub use_fa: bool,
}

impl AblationConfig {
    pub const BASE: Self = AblationConfig {
        use_cp: false,
        use_ia: false,
        use_fa: false,
    };
    pub const IA_FA: Self = AblationConfig {
        use_cp: false,
        use_ia: true,
        use_fa: true,
    };
    pub const FULL: Self = AblationConfig {
        use_cp: true,
        use_ia: true,
        use_fa: true,
    };

    /// `base`, `full`, or the enabled components joined by `+`.
    pub fn label(&self) -> String {
        if *self == Self::FULL {
            return "full".into();
        }
        let parts: Vec<&str> = [(self.use_cp, "cp"), (self.use_ia, "ia"), (self.use_fa, "fa")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            "base".into()
        } else {
            parts.join("+")
        }
    }

    /// `train` with K, N and ε zeroed for disabled components.
    pub fn apply(&self, train: &TrainConfig) -> TrainConfig {
        TrainConfig {
            k_prompts: if self.use_cp { train.k_prompts } else { 0 },
            n_candidates: if self.use_ia { train.n_candidates } else { 1 },
            epsilon: if self.use_fa { train.epsilon } else { 0.0 },
            ..train.clone()
        }
    }
}

impl fmt::Display for AblationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Corpus layout and training setup shared by every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub train_scenes: usize,
    /// Held-out scenes used to pick the best epoch; 0 keeps the last one.
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub captions_per_scene: usize,
    pub corpus_seed: u64,
    pub seeds: Vec<u64>,
    pub configs: Vec<AblationConfig>,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub embedder: ToyEmbedder,
    pub gap: GapSpec,
    pub concept_cap: usize,
    pub concept_max_len: usize,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            train_scenes: 60,
            val_scenes: 20,
            test_scenes: 40,
            captions_per_scene: 5,
            corpus_seed: 0,
            seeds: vec![0, 1, 2],
            configs: vec![AblationConfig::BASE, AblationConfig::IA_FA, AblationConfig::FULL],
            model: ModelShape::test(),
            train: TrainConfig {
                lr: 1e-3,
                epochs: 30,
                batch_size: 16,
                ..TrainConfig::default()
            },
            decode: DecodeConfig {
                beam_size: 3,
                max_len: 14,
                length_penalty: 0.0,
            },
            embedder: ToyEmbedder::default(),
            gap: GapSpec::default(),
            concept_cap: 1000,
            concept_max_len: 3,
        }
    }
}

/// Train, validation and test split of a toy corpus, by scene.
#[derive(Debug, Clone)]
pub struct AblationData {
    pub train: Vec<CaptionRecord>,
    /// Per held-out scene: its captions, which serve as the references.
    pub val: Vec<Vec<CaptionRecord>>,
    pub test: Vec<Vec<CaptionRecord>>,
}

impl AblationData {
    pub fn generate(settings: &AblationSettings) -> Result<Self> {
        let (n_train, n_val) = (settings.train_scenes, settings.val_scenes);
        if n_train == 0 || settings.test_scenes == 0 {
            return Err(Error::Argument("ablation needs both train and test scenes".into()));
        }
        let n = n_train + n_val + settings.test_scenes;
        let corpus = ToyCorpus::generate(n, settings.captions_per_scene, settings.corpus_seed)?;
        let mut train = Vec::new();
        let mut val = vec![Vec::new(); n_val];
        let mut test = vec![Vec::new(); settings.test_scenes];
        for (r, &s) in corpus.records.iter().zip(&corpus.scene_of) {
            match s {
                s if s < n_train => train.push(r.clone()),
                s if s < n_train + n_val => val[s - n_train].push(r.clone()),
                s => test[s - n_train - n_val].push(r.clone()),
            }
        }
        Ok(AblationData { train, val, test })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
}

impl MetricSummary {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(MetricSummary { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub bleu4: MetricSummary,
    pub rouge_l: MetricSummary,
    pub cider: MetricSummary,
    pub n_seeds: usize,
}

/// One trained and evaluated (config, seed) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AblationCell {
    Done(EvalReport),
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// config label → seed → metrics.
    pub cells: BTreeMap<String, BTreeMap<String, AblationCell>>,
    pub summary: BTreeMap<String, ConfigSummary>,
}

impl AblationReport {
    pub fn mean_cider(&self, config: &AblationConfig) -> Option<f64> {
        self.summary.get(&config.label()).map(|s| s.cider.mean)
    }

    pub fn failures(&self) -> usize {
        self.cells
            .values()
            .flat_map(|m| m.values())
            .filter(|c| matches!(c, AblationCell::Failed { .. }))
            .count()
    }
}

/// Concept bank over the training captions.
pub fn build_bank(train: &[CaptionRecord], settings: &AblationSettings) -> Result<ConceptBank> {
    let vocab = extract_concepts(
        train,
        settings.concept_cap,
        &default_stopwords("en"),
        settings.concept_max_len,
    )?;
    embed_concepts(&vocab, &settings.embedder)
}

/// Gapped "vision" feature of each held-out scene: the pooled text
/// features of its captions pushed through [`synth_vision`]. `stream`
/// names the noise stream.
pub fn scene_features(
    scenes: &[Vec<CaptionRecord>],
    settings: &AblationSettings,
    stream: &str,
) -> Result<Vec<UnitVector>> {
    let mut rng = SeedStreams::new(settings.corpus_seed).stream(stream);
    scenes
        .iter()
        .map(|caps| {
            let texts = caps
                .iter()
                .map(|r| settings.embedder.embed(&r.source))
                .collect::<Result<Vec<_>>>()?;
            synth_vision(&pool_frames(&texts)?, &settings.gap, &mut rng)
        })
        .collect()
}

/// Everything shared by the cells of one ablation.
#[derive(Debug, Clone)]
pub struct AblationInputs {
    pub data: AblationData,
    pub bank: ConceptBank,
    pub val_features: Vec<UnitVector>,
    pub test_features: Vec<UnitVector>,
}

impl AblationInputs {
    pub fn prepare(settings: &AblationSettings) -> Result<Self> {
        settings.gap.validate()?;
        let data = AblationData::generate(settings)?;
        let bank = build_bank(&data.train, settings)?;
        let val_features = scene_features(&data.val, settings, "gap-val")?;
        let test_features = scene_features(&data.test, settings, "gap")?;
        Ok(AblationInputs {
            data,
            bank,
            val_features,
            test_features,
        })
    }
}

/// Captions each scene from its feature and scores against its captions.
pub fn score_scenes(
    params: &DecoderParameters,
    vocab: &Vocabulary,
    scenes: &[Vec<CaptionRecord>],
    features: &[UnitVector],
    bank: &ConceptBank,
    k: usize,
    decode: &DecodeConfig,
) -> Result<EvalReport> {
    let mut items = Vec::with_capacity(features.len());
    for (i, (feature, caps)) in features.iter().zip(scenes).enumerate() {
        let prompts = retrieve_prompts(feature, bank, k)?;
        let c = caption_with(feature, prompts, 0, params, decode)?;
        items.push(EvalItem {
            id: format!("scene{i}"),
            candidate: eval_tokenize(&vocab.decode(&c.tokens).join(" ")),
            references: caps.iter().map(|r| eval_tokenize(&r.source_text())).collect(),
        });
    }
    Ok(evaluate(&EvalCorpus::new(items)?))
}

/// Trains one model, keeping the epoch with the best validation CIDEr, and
/// scores its captions of the test scenes.
pub fn run_cell(
    config: &AblationConfig,
    seed: u64,
    inputs: &AblationInputs,
    settings: &AblationSettings,
) -> Result<EvalReport> {
    let data = &inputs.data;
    let languages = Languages::new(vec!["en".into()])?;
    let vocab = Vocabulary::build(&data.train, 1, None)?;
    let cfg = TrainConfig {
        seed,
        ..config.apply(&settings.train)
    };
    let set = TrainingSet::text_only(&data.train, &settings.embedder, &vocab, &languages, cfg.n_candidates)?;
    let dc = settings
        .model
        .with_data(vocab.len(), languages.len(), settings.embedder.dim);
    let mut init = SeedStreams::new(seed).stream("init");
    let params = DecoderParameters::init(dc, &mut init)?;
    let mut validate = |p: &DecoderParameters| {
        score_scenes(
            p,
            &vocab,
            &data.val,
            &inputs.val_features,
            &inputs.bank,
            cfg.k_prompts,
            &settings.decode,
        )
        .map(|r| r.cider)
    };
    let validator: Option<crate::train::Validator> = if data.val.is_empty() { None } else { Some(&mut validate) };
    let outcome = train(params, &set, &inputs.bank, &cfg, None, validator)?;
    score_scenes(
        &outcome.params,
        &vocab,
        &data.test,
        &inputs.test_features,
        &inputs.bank,
        cfg.k_prompts,
        &settings.decode,
    )
}

/// Every (config, seed) cell; a failing cell is recorded and the rest still run.
pub fn run_ablation(settings: &AblationSettings) -> Result<AblationReport> {
    if settings.seeds.is_empty() || settings.configs.is_empty() {
        return Err(Error::Argument(
            "ablation needs at least one config and one seed".into(),
        ));
    }
    let inputs = AblationInputs::prepare(settings)?;
    let mut cells: BTreeMap<String, BTreeMap<String, AblationCell>> = BTreeMap::new();
    for config in &settings.configs {
        for &seed in &settings.seeds {
            let cell = match run_cell(config, seed, &inputs, settings) {
                Ok(r) => {
                    log::info!("{config} seed {seed}: cider {:.4}", r.cider);
                    AblationCell::Done(r)
                }
                Err(e) => {
                    log::warn!("{config} seed {seed} failed: {e}");
                    AblationCell::Failed { error: e.to_string() }
                }
            };
            cells.entry(config.label()).or_default().insert(seed.to_string(), cell);
        }
    }
    let summary = cells
        .iter()
        .filter_map(|(label, by_seed)| {
            let done: Vec<&EvalReport> = by_seed
                .values()
                .filter_map(|c| match c {
                    AblationCell::Done(r) => Some(r),
                    AblationCell::Failed { .. } => None,
                })
                .collect();
            let pick = |f: fn(&EvalReport) -> f64| MetricSummary::of(&done.iter().map(|r| f(r)).collect::<Vec<_>>());
            Some((
                label.clone(),
                ConfigSummary {
                    bleu4: pick(|r| r.bleu4)?,
                    rouge_l: pick(|r| r.rouge_l)?,
                    cider: pick(|r| r.cider)?,
                    n_seeds: done.len(),
                },
            ))
        })
        .collect();
    Ok(AblationReport { cells, summary })
}
