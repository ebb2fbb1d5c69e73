//! Desk-scale stand-ins for a contrastive text/vision encoder: a hashed
//! bag-of-n-grams text embedder, a synthetic modality gap, a templated
//! caption corpus, and the component ablation harness built on them.

mod ablation;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CaptionRecord;
use crate::embedding::{TextEmbedder, UnitVector};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub use ablation::{
    build_bank, run_ablation, run_cell, scene_features, score_scenes, AblationCell, AblationConfig, AblationData,
    AblationInputs, AblationReport, AblationSettings, ConfigSummary, MetricSummary,
};

/// Deterministic text embedder: the normalized sum of seeded pseudo-random
/// unit vectors, one per unigram and one per bigram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        ToyEmbedder { dim: 64, seed: 0 }
    }
}

impl ToyEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        ToyEmbedder { dim, seed }
    }

    /// Unit vector for one hashed key. Depends only on `(seed, kind, key)`.
    fn hashed(&self, kind: &str, key: &[&str]) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(kind.as_bytes());
        for k in key {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
        }
        let mut rng = StreamRng::from_seed(h.finalize().into());
        let raw: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        raw.into_iter().map(|v| v / norm).collect()
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        self.hashed("uni", &[token])
    }
}

impl TextEmbedder for ToyEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &[String]) -> Result<UnitVector> {
        if tokens.is_empty() {
            return Err(Error::Argument("cannot embed an empty text".into()));
        }
        let mut acc = vec![0.0; self.dim];
        let mut add = |v: Vec<f64>| acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        for t in tokens {
            add(self.hashed("uni", &[t]));
        }
        for w in tokens.windows(2) {
            add(self.hashed("bi", &[&w[0], &w[1]]));
        }
        UnitVector::normalize(&acc)
    }
}

/// A coherent modality shift plus per-item noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapSpec {
    pub offset_scale: f64,
    pub rotation_seed: u64,
    pub noise_scale: f64,
}

impl Default for GapSpec {
    fn default() -> Self {
        GapSpec {
            offset_scale: 0.5,
            rotation_seed: 0,
            noise_scale: 0.05,
        }
    }
}

impl GapSpec {
    pub fn none() -> Self {
        GapSpec {
            offset_scale: 0.0,
            rotation_seed: 0,
            noise_scale: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.offset_scale >= 0.0 && self.noise_scale >= 0.0) {
            return Err(Error::Argument(format!(
                "gap scales must be non-negative, got offset {} and noise {}",
                self.offset_scale, self.noise_scale
            )));
        }
        Ok(())
    }

    /// The shared unit offset direction for dimension `dim`.
    pub fn offset_direction(&self, dim: usize) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(b"gap-offset");
        h.update(self.rotation_seed.to_le_bytes());
        h.update((dim as u64).to_le_bytes());
        let mut rng = StreamRng::from_seed(h.finalize().into());
        let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        raw.into_iter().map(|v| v / norm).collect()
    }
}

/// `normalize(text + offset_scale·u + noise)` with `noise ~ N(0, noise_scale²)` per dimension.
pub fn synth_vision<R: Rng + ?Sized>(text: &UnitVector, spec: &GapSpec, rng: &mut R) -> Result<UnitVector> {
    spec.validate()?;
    synth_vision_with(text, spec, &spec.offset_direction(text.dim()), rng)
}

pub(crate) fn synth_vision_with<R: Rng + ?Sized>(
    text: &UnitVector,
    spec: &GapSpec,
    direction: &[f64],
    rng: &mut R,
) -> Result<UnitVector> {
    let shifted: Vec<f64> = text
        .values()
        .iter()
        .zip(direction)
        .map(|(t, u)| {
            let n: f64 = if spec.noise_scale > 0.0 {
                spec.noise_scale * Distribution::<f64>::sample(&StandardNormal, rng)
            } else {
                0.0
            };
            t + spec.offset_scale * u + n
        })
        .collect();
    if spec.offset_scale == 0.0 && spec.noise_scale == 0.0 {
        return Ok(text.clone());
    }
    UnitVector::normalize(&shifted)
}

const ADJECTIVES: &[&str] = &["red", "small", "young", "old", "black", "white", "brown", "spotted"];
const NOUNS: &[&str] = &[
    "dog", "cat", "man", "woman", "girl", "boy", "horse", "bird", "cow", "child",
];
const VERBS: &[&str] = &[
    "running", "sitting", "standing", "sleeping", "playing", "walking", "jumping", "resting",
];
const PLACES: &[&str] = &["grass", "beach", "street", "road", "bench", "field", "table", "snow"];

/// A toy "image": the attributes every caption of it mentions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Scene {
    pub adjective: usize,
    pub noun: usize,
    pub verb: usize,
    pub place: usize,
}

impl Scene {
    /// One of five paraphrase templates.
    pub fn caption(&self, template: usize) -> String {
        let (a, n, v, p) = (
            ADJECTIVES[self.adjective],
            NOUNS[self.noun],
            VERBS[self.verb],
            PLACES[self.place],
        );
        match template % 5 {
            0 => format!("a {a} {n} {v} on the {p}"),
            1 => format!("a {a} {n} is {v} on the {p}"),
            2 => format!("the {a} {n} {v} on a {p}"),
            3 => format!("one {a} {n} {v} on the {p}"),
            _ => format!("a {a} {n} {v} near the {p}"),
        }
    }
}

/// A templated caption corpus grouped by scene.
#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub scenes: Vec<Scene>,
    /// `records[i]` describes `scenes[scene_of[i]]`.
    pub records: Vec<CaptionRecord>,
    pub scene_of: Vec<usize>,
}

impl ToyCorpus {
    /// `n_scenes` distinct random scenes, each described by
    /// `captions_per_scene` captions using distinct templates.
    pub fn generate(n_scenes: usize, captions_per_scene: usize, seed: u64) -> Result<Self> {
        let space = ADJECTIVES.len() * NOUNS.len() * VERBS.len() * PLACES.len();
        if n_scenes == 0 || n_scenes > space || captions_per_scene == 0 || captions_per_scene > 5 {
            return Err(Error::Argument(format!(
                "toy corpus of {n_scenes} scenes × {captions_per_scene} captions is not generable"
            )));
        }
        let mut rng = StreamRng::seed_from_u64(seed);
        let mut seen = std::collections::HashSet::new();
        let mut scenes = Vec::with_capacity(n_scenes);
        while scenes.len() < n_scenes {
            let s = Scene {
                adjective: rng.random_range(0..ADJECTIVES.len()),
                noun: rng.random_range(0..NOUNS.len()),
                verb: rng.random_range(0..VERBS.len()),
                place: rng.random_range(0..PLACES.len()),
            };
            if seen.insert(s) {
                scenes.push(s);
            }
        }
        let mut records = Vec::new();
        let mut scene_of = Vec::new();
        for (si, s) in scenes.iter().enumerate() {
            let first = rng.random_range(0..5);
            for c in 0..captions_per_scene {
                let text = s.caption(first + c);
                records.push(CaptionRecord::new(format!("s{si}c{c}"), &text, "en")?);
                scene_of.push(si);
            }
        }
        Ok(ToyCorpus {
            scenes,
            records,
            scene_of,
        })
    }
}
