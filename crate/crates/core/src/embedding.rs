//! Operations on the unit sphere shared by text and vision features.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::dot;
use crate::error::{Error, Result};

/// Norms below this cannot be normalized.
pub const DEGENERATE_NORM: f64 = 1e-12;
/// Allowed deviation of a [`UnitVector`]'s norm from one.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// An L2-normalized feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Scales `raw` to unit length.
    pub fn normalize(raw: &[f64]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::EmptyInput("cannot normalize an empty vector".into()));
        }
        let norm = l2_norm(raw);
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("vector norm is {norm}")));
        }
        if norm <= DEGENERATE_NORM {
            return Err(Error::Degenerate { norm });
        }
        Ok(UnitVector(raw.iter().map(|v| v / norm).collect()))
    }

    /// Wraps values that are already normalized, checking the invariant.
    pub fn from_normalized(values: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&values);
        if values.is_empty() || (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Numeric(format!("expected a unit vector, norm is {norm}")));
        }
        Ok(UnitVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `raw / ‖raw‖₂`.
pub fn normalize(raw: &[f64]) -> Result<UnitVector> {
    UnitVector::normalize(raw)
}

/// Anything that maps a token sequence into the shared embedding space.
pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, tokens: &[String]) -> Result<UnitVector>;
}

/// Precomputed features keyed by their space-joined text, e.g. loaded from
/// an embedding file produced by a real text encoder.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    dim: usize,
    rows: HashMap<String, UnitVector>,
}

impl FeatureTable {
    pub fn new(dim: usize, rows: impl IntoIterator<Item = (String, UnitVector)>) -> Result<Self> {
        let mut map = HashMap::new();
        for (key, v) in rows {
            if v.dim() != dim {
                return Err(Error::Dimension(format!(
                    "feature for {key:?} has dimension {}, expected {dim}",
                    v.dim()
                )));
            }
            map.insert(key, v);
        }
        Ok(FeatureTable { dim, rows: map })
    }

    pub fn get(&self, key: &str) -> Option<&UnitVector> {
        self.rows.get(key)
    }
}

impl TextEmbedder for FeatureTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &[String]) -> Result<UnitVector> {
        let key = tokens.join(" ");
        self.rows
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no precomputed feature for {key:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Concept {
    pub surface: String,
    pub feature: UnitVector,
}

/// Embedded concept phrases, most frequent first.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBank {
    dim: usize,
    concepts: Vec<Concept>,
}

impl ConceptBank {
    pub fn new(dim: usize, concepts: Vec<Concept>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &concepts {
            if c.feature.dim() != dim {
                return Err(Error::Dimension(format!(
                    "concept {:?} has dimension {}, bank expects {dim}",
                    c.surface,
                    c.feature.dim()
                )));
            }
            if !seen.insert(c.surface.as_str()) {
                return Err(Error::Data(format!("duplicate concept {:?}", c.surface)));
            }
        }
        Ok(ConceptBank { dim, concepts })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn get(&self, i: usize) -> Option<&Concept> {
        self.concepts.get(i)
    }
}

/// The `K` retrieved concept features, most similar first.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    dim: usize,
    features: Vec<UnitVector>,
    indices: Vec<usize>,
    similarities: Vec<f64>,
}

impl PromptSet {
    /// A prompt set with no rows, used when concept prompts are ablated.
    pub fn empty(dim: usize) -> Self {
        PromptSet {
            dim,
            features: Vec::new(),
            indices: Vec::new(),
            similarities: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn features(&self) -> &[UnitVector] {
        &self.features
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn similarities(&self) -> &[f64] {
        &self.similarities
    }

    pub fn surfaces<'a>(&self, bank: &'a ConceptBank) -> Vec<&'a str> {
        self.indices
            .iter()
            .map(|&i| bank.concepts[i].surface.as_str())
            .collect()
    }
}

/// Descending similarity, ties broken by lower index.
pub(crate) fn rank_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Indices of the `k` best-scoring entries under [`rank_order`], best first.
pub(crate) fn top_k(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    if k == 0 {
        return Vec::new();
    }
    if k < ranked.len() {
        ranked.select_nth_unstable_by(k - 1, |a, b| rank_order(*a, *b));
        ranked.truncate(k);
    }
    ranked.sort_by(|a, b| rank_order(*a, *b));
    ranked
}

/// The `k` bank entries with the largest dot product to `query`, sorted by
/// similarity (ties by lower bank index). `k = 0` yields an empty set.
pub fn retrieve_prompts(query: &UnitVector, bank: &ConceptBank, k: usize) -> Result<PromptSet> {
    if query.dim() != bank.dim {
        return Err(Error::Dimension(format!(
            "query of dimension {} against a bank of dimension {}",
            query.dim(),
            bank.dim
        )));
    }
    if k > bank.len() {
        return Err(Error::Bound(format!(
            "requested {k} prompts from a bank of {}",
            bank.len()
        )));
    }
    let scores: Vec<f64> = bank.concepts.iter().map(|c| c.feature.dot(query)).collect();
    let ranked = top_k(&scores, k);
    Ok(PromptSet {
        dim: bank.dim,
        features: ranked.iter().map(|&(i, _)| bank.concepts[i].feature.clone()).collect(),
        indices: ranked.iter().map(|&(i, _)| i).collect(),
        similarities: ranked.iter().map(|&(_, s)| s).collect(),
    })
}

/// Normalized mean of per-frame features. Frames are summed in a canonical
/// order so the result does not depend on the order they were given in.
pub fn pool_frames(frames: &[UnitVector]) -> Result<UnitVector> {
    let Some(first) = frames.first() else {
        return Err(Error::EmptyInput("no frames to pool".into()));
    };
    let dim = first.dim();
    if let Some(bad) = frames.iter().find(|f| f.dim() != dim) {
        return Err(Error::Dimension(format!("frames of dimension {dim} and {}", bad.dim())));
    }
    if frames.len() == 1 {
        return Ok(first.clone());
    }
    let mut ordered: Vec<&UnitVector> = frames.iter().collect();
    ordered.sort_by(|a, b| {
        a.0.iter()
            .zip(&b.0)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    });
    let mut mean = vec![0.0; dim];
    for f in ordered {
        mean.iter_mut().zip(&f.0).for_each(|(m, v)| *m += v);
    }
    let n = frames.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    UnitVector::normalize(&mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub centroid_distance: f64,
    pub mean_paired_cosine: f64,
}

fn centroid(vectors: &[UnitVector]) -> Vec<f64> {
    let mut c = vec![0.0; vectors[0].dim()];
    for v in vectors {
        c.iter_mut().zip(&v.0).for_each(|(a, b)| *a += b);
    }
    c.iter_mut().for_each(|a| *a /= vectors.len() as f64);
    c
}

/// Distance between the text and vision centroids and the mean cosine over
/// the given `(text, vision)` index pairs.
pub fn gap_report(text: &[UnitVector], vision: &[UnitVector], pairs: &[(usize, usize)]) -> Result<GapReport> {
    if text.is_empty() || vision.is_empty() || pairs.is_empty() {
        return Err(Error::EmptyInput("gap report needs text, vision and pairs".into()));
    }
    let dim = text[0].dim();
    if text.iter().chain(vision).any(|v| v.dim() != dim) {
        return Err(Error::Dimension("text and vision features differ in dimension".into()));
    }
    let mut cos = 0.0;
    for &(t, v) in pairs {
        let (Some(a), Some(b)) = (text.get(t), vision.get(v)) else {
            return Err(Error::Bound(format!(
                "pair ({t}, {v}) outside {} text and {} vision features",
                text.len(),
                vision.len()
            )));
        };
        cos += a.dot(b);
    }
    let ct = centroid(text);
    let cv = centroid(vision);
    let diff: Vec<f64> = ct.iter().zip(&cv).map(|(a, b)| a - b).collect();
    Ok(GapReport {
        centroid_distance: l2_norm(&diff),
        mean_paired_cosine: cos / pairs.len() as f64,
    })
}
