//! Input augmentation (swap a sentence for a near neighbour) and feature
//! augmentation (Gaussian noise on the unit sphere).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{top_k, UnitVector};
use crate::error::{Error, Result};

/// An anchor sentence together with its `N - 1` most similar corpus entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateSet {
    pub anchor: usize,
    /// `members[0] == anchor`; the rest in descending similarity.
    pub members: Vec<usize>,
}

impl CandidateSet {
    pub fn singleton(anchor: usize) -> Self {
        CandidateSet {
            anchor,
            members: vec![anchor],
        }
    }

    pub fn validate(&self, corpus_len: usize) -> Result<()> {
        if self.members.first() != Some(&self.anchor) {
            return Err(Error::Data(format!(
                "candidate set of {} does not start with its anchor",
                self.anchor
            )));
        }
        let mut sorted = self.members.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.members.len() {
            return Err(Error::Data(format!(
                "candidate set of {} repeats a member",
                self.anchor
            )));
        }
        if let Some(&bad) = self.members.iter().find(|&&m| m >= corpus_len) {
            return Err(Error::Bound(format!(
                "candidate {bad} outside a corpus of {corpus_len}"
            )));
        }
        Ok(())
    }
}

/// For every anchor, the anchor itself followed by the `n - 1` other entries
/// with the highest cosine similarity (ties by lower index).
pub fn build_candidate_sets(features: &[UnitVector], n: usize) -> Result<Vec<CandidateSet>> {
    if n == 0 {
        return Err(Error::Argument("candidate sets need n >= 1".into()));
    }
    if n > features.len() {
        return Err(Error::Bound(format!(
            "candidate sets of {n} from a corpus of {}",
            features.len()
        )));
    }
    let Some(first) = features.first() else {
        return Ok(Vec::new());
    };
    if features.iter().any(|f| f.dim() != first.dim()) {
        return Err(Error::Dimension("corpus features differ in dimension".into()));
    }
    let mut sets = Vec::with_capacity(features.len());
    let mut scores = vec![0.0; features.len()];
    for (i, anchor) in features.iter().enumerate() {
        for (j, f) in features.iter().enumerate() {
            scores[j] = if i == j { f64::NEG_INFINITY } else { anchor.dot(f) };
        }
        let mut members = vec![i];
        members.extend(top_k(&scores, n - 1).into_iter().map(|(j, _)| j));
        sets.push(CandidateSet { anchor: i, members });
    }
    Ok(sets)
}

/// Candidate sets drawn only from entries that share the anchor's group
/// (its language), with indices in corpus numbering.
pub fn build_candidate_sets_grouped<G: AsRef<str>>(
    features: &[UnitVector],
    groups: &[G],
    n: usize,
) -> Result<Vec<CandidateSet>> {
    if groups.len() != features.len() {
        return Err(Error::Dimension(format!(
            "{} group labels for {} features",
            groups.len(),
            features.len()
        )));
    }
    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        by_group.entry(g.as_ref()).or_default().push(i);
    }
    let mut out: Vec<Option<CandidateSet>> = vec![None; features.len()];
    for (group, idx) in by_group {
        let sub: Vec<UnitVector> = idx.iter().map(|&i| features[i].clone()).collect();
        let sets = build_candidate_sets(&sub, n).map_err(|e| match e {
            Error::Bound(m) => Error::Bound(format!("language {group:?}: {m}")),
            other => other,
        })?;
        for s in sets {
            let anchor = idx[s.anchor];
            out[anchor] = Some(CandidateSet {
                anchor,
                members: s.members.iter().map(|&m| idx[m]).collect(),
            });
        }
    }
    Ok(out.into_iter().map(|s| s.expect("every index is grouped")).collect())
}

/// Uniformly samples one member of the candidate set.
pub fn input_augment<R: Rng + ?Sized>(set: &CandidateSet, rng: &mut R) -> usize {
    if set.members.len() == 1 {
        return set.members[0];
    }
    set.members[rng.random_range(0..set.members.len())]
}

/// Gaussian feature noise. `epsilon` is the per-dimension variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub epsilon: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn new(epsilon: f64, seed: u64) -> Result<Self> {
        if epsilon.is_nan() || epsilon < 0.0 || !epsilon.is_finite() {
            return Err(Error::Argument(format!(
                "noise variance {epsilon} must be non-negative"
            )));
        }
        Ok(NoiseConfig { epsilon, seed })
    }
}

/// `normalize(feat + n)` with `n ~ N(0, ε)` per dimension. A degenerate sum is
/// redrawn once before failing.
pub fn feature_augment<R: Rng + ?Sized>(feat: &UnitVector, cfg: &NoiseConfig, rng: &mut R) -> Result<UnitVector> {
    if cfg.epsilon == 0.0 {
        return Ok(feat.clone());
    }
    let std = cfg.epsilon.sqrt();
    let draw = |rng: &mut R| -> Vec<f64> {
        (0..feat.dim())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            })
            .collect()
    };
    match feature_augment_with_noise(feat, &draw(rng)) {
        Err(Error::Degenerate { .. }) => feature_augment_with_noise(feat, &draw(rng)),
        other => other,
    }
}

/// `normalize(feat + noise)` for an explicit noise vector.
pub fn feature_augment_with_noise(feat: &UnitVector, noise: &[f64]) -> Result<UnitVector> {
    if noise.len() != feat.dim() {
        return Err(Error::Dimension(format!(
            "noise of length {} for a feature of dimension {}",
            noise.len(),
            feat.dim()
        )));
    }
    let sum: Vec<f64> = feat.values().iter().zip(noise).map(|(a, b)| a + b).collect();
    UnitVector::normalize(&sum)
}

pub fn write_candidates<W: Write>(mut w: W, sets: &[CandidateSet]) -> Result<()> {
    for s in sets {
        serde_json::to_writer(&mut w, s)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Reads candidate sets and checks they cover anchors `0..corpus_len` in order.
pub fn read_candidates<R: BufRead>(reader: R, corpus_len: usize) -> Result<Vec<CandidateSet>> {
    let mut sets = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: CandidateSet =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("candidates line {}: {e}", lineno + 1)))?;
        s.validate(corpus_len)?;
        if s.anchor != sets.len() {
            return Err(Error::Data(format!(
                "candidates line {}: expected anchor {}, found {}",
                lineno + 1,
                sets.len(),
                s.anchor
            )));
        }
        sets.push(s);
    }
    if sets.len() != corpus_len {
        return Err(Error::Data(format!(
            "{} candidate sets for a corpus of {corpus_len}",
            sets.len()
        )));
    }
    Ok(sets)
}
