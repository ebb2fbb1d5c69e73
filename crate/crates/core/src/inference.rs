//! Greedy and beam-search caption decoding.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderParameters, BOS, EOS};
use crate::embedding::{pool_frames, retrieve_prompts, ConceptBank, PromptSet, UnitVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Generated tokens, EOS included.
    pub max_len: usize,
    /// Exponent of the length normalization; 0 ranks by the raw sum.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 3,
            max_len: 30,
            length_penalty: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Argument("beam size must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Argument("max_len must be at least 1".into()));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::Argument("length penalty must be finite".into()));
        }
        Ok(())
    }
}

/// A partial or complete hypothesis. `tokens` excludes BOS and ends with EOS
/// once finished.
#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub finished: bool,
}

impl Beam {
    pub fn score(&self, length_penalty: f64) -> f64 {
        if length_penalty == 0.0 || self.tokens.is_empty() {
            self.logprob
        } else {
            self.logprob / (self.tokens.len() as f64).powf(length_penalty)
        }
    }
}

fn check_dist(logp: &[f64]) -> Result<()> {
    if logp.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    if logp.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Numeric("step distribution contains NaN or +inf".into()));
    }
    Ok(())
}

/// Highest log-probability token at each step, lowest id on ties.
pub fn greedy<F>(mut step_fn: F, max_len: usize) -> Result<Beam>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if max_len == 0 {
        return Err(Error::Argument("max_len must be at least 1".into()));
    }
    let mut beam = Beam {
        tokens: Vec::new(),
        logprob: 0.0,
        finished: false,
    };
    while beam.tokens.len() < max_len {
        let logp = step_fn(&beam.tokens)?;
        check_dist(&logp)?;
        let (best, lp) =
            logp.iter().copied().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
            );
        beam.tokens.push(best);
        beam.logprob += lp;
        if best == EOS {
            beam.finished = true;
            break;
        }
    }
    Ok(beam)
}

/// Beam search over `step_fn`, which maps the generated prefix to
/// log-probabilities of the next token. Each step keeps the `beam_size` best
/// expansions of all active beams; expansions ending in EOS are frozen. The
/// search ends when no beam is active, at `max_len`, or (without a length
/// penalty) once the best frozen beam scores at least the best active one.
/// Returns frozen and length-capped beams, best first.
pub fn beam_search<F>(mut step_fn: F, beam_size: usize, max_len: usize, length_penalty: f64) -> Result<Vec<Beam>>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    DecodeConfig {
        beam_size,
        max_len,
        length_penalty,
    }
    .validate()?;
    let mut active = vec![Beam {
        tokens: Vec::new(),
        logprob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Beam> = Vec::new();
    for _ in 0..max_len {
        let mut expansions: Vec<(usize, usize, f64)> = Vec::new();
        for (b, beam) in active.iter().enumerate() {
            let logp = step_fn(&beam.tokens)?;
            check_dist(&logp)?;
            for (tok, lp) in logp.into_iter().enumerate() {
                if lp > f64::NEG_INFINITY {
                    expansions.push((b, tok, beam.logprob + lp));
                }
            }
        }
        let score_of = |&(b, _, lp): &(usize, usize, f64)| {
            let len = active[b].tokens.len() + 1;
            if length_penalty == 0.0 {
                lp
            } else {
                lp / (len as f64).powf(length_penalty)
            }
        };
        expansions.sort_by(|x, y| {
            score_of(y)
                .total_cmp(&score_of(x))
                .then(x.0.cmp(&y.0))
                .then(x.1.cmp(&y.1))
        });
        expansions.truncate(beam_size);
        let mut next = Vec::with_capacity(beam_size);
        for (b, tok, lp) in expansions {
            let mut tokens = active[b].tokens.clone();
            tokens.push(tok);
            let beam = Beam {
                tokens,
                logprob: lp,
                finished: tok == EOS,
            };
            if beam.finished {
                finished.push(beam);
            } else {
                next.push(beam);
            }
        }
        active = next;
        if active.is_empty() {
            break;
        }
        if length_penalty == 0.0 {
            let best_done = finished.iter().map(|b| b.logprob).fold(f64::NEG_INFINITY, f64::max);
            let best_open = active.iter().map(|b| b.logprob).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_open {
                break;
            }
        }
    }
    finished.extend(active);
    finished.sort_by(|a, b| {
        b.score(length_penalty)
            .partial_cmp(&a.score(length_penalty))
            .unwrap_or(Ordering::Equal)
            .then(b.finished.cmp(&a.finished))
    });
    Ok(finished)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Caption {
    /// Generated ids without BOS or EOS.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub finished: bool,
    pub prompts: PromptSet,
    pub feature: UnitVector,
}

/// Pools `frames`, retrieves `k` prompts from the pooled feature and decodes
/// the best hypothesis in language `lang`.
pub fn caption(
    frames: &[UnitVector],
    lang: usize,
    bank: &ConceptBank,
    k: usize,
    params: &DecoderParameters,
    decode: &DecodeConfig,
) -> Result<Caption> {
    decode.validate()?;
    let feature = pool_frames(frames)?;
    let prompts = retrieve_prompts(&feature, bank, k)?;
    caption_with(&feature, prompts, lang, params, decode)
}

/// Decodes with an explicit feature and prompt set.
pub fn caption_with(
    feature: &UnitVector,
    prompts: PromptSet,
    lang: usize,
    params: &DecoderParameters,
    decode: &DecodeConfig,
) -> Result<Caption> {
    decode.validate()?;
    check_capacity(&prompts, decode.max_len, params)?;
    let best = beam_search(
        step_fn(params, &prompts, feature, lang),
        decode.beam_size,
        decode.max_len,
        decode.length_penalty,
    )?
    .into_iter()
    .next()
    .ok_or_else(|| Error::Numeric("beam search produced no hypothesis".into()))?;
    Ok(Caption::from_beam(best, prompts, feature))
}

/// Like [`caption_with`] but decodes greedily.
pub fn caption_greedy_with(
    feature: &UnitVector,
    prompts: PromptSet,
    lang: usize,
    params: &DecoderParameters,
    max_len: usize,
) -> Result<Caption> {
    check_capacity(&prompts, max_len, params)?;
    let best = greedy(step_fn(params, &prompts, feature, lang), max_len)?;
    Ok(Caption::from_beam(best, prompts, feature))
}

fn check_capacity(prompts: &PromptSet, max_len: usize, params: &DecoderParameters) -> Result<()> {
    let needed = prompts.len() + max_len;
    if needed > params.config().max_len {
        return Err(Error::Capacity {
            needed,
            max_len: params.config().max_len,
        });
    }
    Ok(())
}

fn step_fn<'a>(
    params: &'a DecoderParameters,
    prompts: &'a PromptSet,
    feature: &'a UnitVector,
    lang: usize,
) -> impl FnMut(&[usize]) -> Result<Vec<f64>> + 'a {
    move |generated: &[usize]| {
        let mut input = Vec::with_capacity(generated.len() + 1);
        input.push(BOS);
        input.extend_from_slice(generated);
        params.next_log_probs(prompts, feature, &input, lang)
    }
}

impl Caption {
    fn from_beam(best: Beam, prompts: PromptSet, feature: &UnitVector) -> Self {
        let mut tokens = best.tokens;
        if best.finished {
            tokens.pop();
        }
        Caption {
            tokens,
            logprob: best.logprob,
            finished: best.finished,
            prompts,
            feature: feature.clone(),
        }
    }
}

/// One line of caption output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionLine {
    pub id: String,
    pub caption: String,
    pub prompts: Vec<String>,
    pub logprob: f64,
}
