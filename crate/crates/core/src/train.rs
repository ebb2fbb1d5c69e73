//! Text-only auto-encoding/translation training and paired fine-tuning with
//! AdamW, linear warmup, label smoothing and global-norm clipping.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{build_candidate_sets_grouped, feature_augment, input_augment, CandidateSet, NoiseConfig};
use crate::corpus::CaptionRecord;
use crate::decoder::{batch_loss, DecoderParameters, Example};
use crate::embedding::{pool_frames, retrieve_prompts, ConceptBank, TextEmbedder, UnitVector};
use crate::error::{Error, Result};
use crate::rng::{SeedStreams, StreamRng};
use crate::vocab::{Languages, Vocabulary};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    TextOnly,
    Paired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub k_prompts: usize,
    pub n_candidates: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub mode: TrainMode,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            warmup_fraction: 0.10,
            epochs: 10,
            batch_size: 32,
            weight_decay: 0.01,
            label_smoothing: 0.1,
            k_prompts: 16,
            n_candidates: 5,
            epsilon: 0.01,
            seed: 0,
            mode: TrainMode::TextOnly,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup fraction {} outside [0, 1]", self.warmup_fraction));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.n_candidates == 0 {
            return bad("candidate set size must be at least 1".into());
        }
        NoiseConfig::new(self.epsilon, self.seed)?;
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return bad(format!("gradient clip {} must be non-negative", self.grad_clip));
        }
        Ok(())
    }
}

/// Learning rate for update `step` of `total_steps`: a linear ramp from 0 over
/// the first `⌈warmup_fraction · total_steps⌉` steps, constant afterwards.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> f64 {
    let warmup = (cfg.warmup_fraction * total_steps as f64).ceil() as u64;
    if step >= warmup {
        cfg.lr
    } else {
        cfg.lr * step as f64 / warmup as f64
    }
}

/// AdamW moments and the number of updates taken.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &DecoderParameters) -> Self {
        let zeros: Vec<Vec<f64>> = (0..params.len()).map(|i| vec![0.0; params.tensor(i).len()]).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One AdamW update of a flat weight slice at (1-based) step `t`.
pub fn adamw_update(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, wd: f64) {
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..w.len() {
        w[i] -= lr * wd * w[i];
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        w[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
}

/// Decoupled weight decay followed by a bias-corrected Adam step.
pub fn adamw_step(
    params: &mut DecoderParameters,
    grads: &[Vec<f64>],
    opt: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || opt.m.len() != params.len() {
        return Err(Error::Dimension(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            opt.m.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.len() != params.tensor(i).len() || opt.m[i].len() != g.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for parameter {:?} of length {}",
                g.len(),
                params.names()[i],
                params.tensor(i).len()
            )));
        }
    }
    opt.t += 1;
    for (i, g) in grads.iter().enumerate() {
        let w = params.tensor_mut(i).data_mut();
        adamw_update(w, g, &mut opt.m[i], &mut opt.v[i], opt.t, lr, weight_decay);
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// One training sentence: the (text or vision) feature it is conditioned on,
/// its target token ids and output language.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingItem {
    pub id: String,
    pub feature: UnitVector,
    pub ids: Vec<usize>,
    pub lang: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub items: Vec<TrainingItem>,
    pub candidates: Vec<CandidateSet>,
}

impl TrainingSet {
    /// Embeds every source text and builds per-language candidate sets of
    /// size `n_candidates`.
    pub fn text_only(
        records: &[CaptionRecord],
        embedder: &dyn TextEmbedder,
        vocab: &Vocabulary,
        languages: &Languages,
        n_candidates: usize,
    ) -> Result<Self> {
        let features = records
            .iter()
            .map(|r| {
                embedder.embed(&r.source).map_err(|e| Error::Embed {
                    phrase: r.source_text(),
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let groups: Vec<&str> = records.iter().map(|r| r.lang.as_str()).collect();
        let candidates = if records.is_empty() {
            Vec::new()
        } else {
            build_candidate_sets_grouped(&features, &groups, n_candidates)?
        };
        Self::assemble(records, features, candidates, vocab, languages)
    }

    /// Pairs records with their vision frames, pooled to one feature each.
    pub fn paired(
        pairs: &[(Vec<UnitVector>, CaptionRecord)],
        vocab: &Vocabulary,
        languages: &Languages,
    ) -> Result<Self> {
        let mut features = Vec::with_capacity(pairs.len());
        for (frames, r) in pairs {
            if frames.is_empty() {
                return Err(Error::Data(format!("record {:?} has no vision features", r.id)));
            }
            features.push(pool_frames(frames)?);
        }
        let records: Vec<CaptionRecord> = pairs.iter().map(|(_, r)| r.clone()).collect();
        let candidates = (0..pairs.len()).map(CandidateSet::singleton).collect();
        Self::assemble(&records, features, candidates, vocab, languages)
    }

    fn assemble(
        records: &[CaptionRecord],
        features: Vec<UnitVector>,
        candidates: Vec<CandidateSet>,
        vocab: &Vocabulary,
        languages: &Languages,
    ) -> Result<Self> {
        let items = records
            .iter()
            .zip(features)
            .map(|(r, feature)| {
                Ok(TrainingItem {
                    id: r.id.clone(),
                    feature,
                    ids: vocab.encode(r.output_tokens()),
                    lang: languages.id(&r.lang)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingSet { items, candidates })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// What augmentation drew for one batch entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub anchor: usize,
    pub sampled: usize,
    pub example: Example,
}

/// Builds the conditioned example for item `idx`. In text-only mode the
/// feature comes from a uniformly sampled candidate and is noised; prompts
/// are retrieved from the resulting feature. Targets are always the
/// anchor's own tokens.
pub fn augment_example<R: Rng + ?Sized>(
    set: &TrainingSet,
    idx: usize,
    bank: &ConceptBank,
    cfg: &TrainConfig,
    ia_rng: &mut R,
    fa_rng: &mut R,
) -> Result<Draw> {
    let item = set
        .items
        .get(idx)
        .ok_or_else(|| Error::Bound(format!("item {idx} outside a set of {}", set.len())))?;
    let (sampled, feature) = match cfg.mode {
        TrainMode::TextOnly => {
            let cand = set
                .candidates
                .get(idx)
                .ok_or_else(|| Error::Data(format!("no candidate set for item {idx}")))?;
            let sampled = input_augment(cand, ia_rng);
            let noise = NoiseConfig::new(cfg.epsilon, cfg.seed)?;
            (sampled, feature_augment(&set.items[sampled].feature, &noise, fa_rng)?)
        }
        TrainMode::Paired => (idx, item.feature.clone()),
    };
    let prompts = retrieve_prompts(&feature, bank, cfg.k_prompts)?;
    Ok(Draw {
        anchor: idx,
        sampled,
        example: Example {
            prompts,
            global: feature,
            ids: item.ids.clone(),
            lang: item.lang,
        },
    })
}

/// Random streams consumed by one update.
#[derive(Debug, Clone)]
pub struct StepRngs {
    pub ia: StreamRng,
    pub fa: StreamRng,
    pub dropout: Option<StreamRng>,
}

impl StepRngs {
    pub fn for_step(streams: &SeedStreams, step: u64, dropout: bool) -> Self {
        StepRngs {
            ia: streams.indexed("ia", step),
            fa: streams.indexed("fa", step),
            dropout: dropout.then(|| streams.indexed("dropout", step)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Loss before the update.
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub draws: Vec<Draw>,
}

/// Augments `batch`, computes the mean smoothed cross entropy and applies one
/// AdamW update at the scheduled learning rate.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut DecoderParameters,
    opt: &mut OptimizerState,
    set: &TrainingSet,
    batch: &[usize],
    bank: &ConceptBank,
    cfg: &TrainConfig,
    total_steps: u64,
    rngs: StepRngs,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let StepRngs {
        mut ia,
        mut fa,
        dropout,
    } = rngs;
    let draws = batch
        .iter()
        .map(|&i| augment_example(set, i, bank, cfg, &mut ia, &mut fa))
        .collect::<Result<Vec<_>>>()?;
    let examples: Vec<Example> = draws.iter().map(|d| d.example.clone()).collect();
    let (loss, grads) = batch_loss(params, &examples, cfg.label_smoothing, dropout, true)?;
    let mut grads = grads.expect("gradients requested");
    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {grad_norm}")));
    }
    let lr = lr_at(opt.t + 1, total_steps, cfg);
    adamw_step(params, &grads, opt, lr, cfg.weight_decay)?;
    Ok(StepReport {
        loss,
        lr,
        grad_norm,
        draws,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DecoderParameters,
    pub steps: u64,
    pub losses: Vec<f64>,
    /// Validation score per epoch, when a validator was given.
    pub validation: Vec<f64>,
    /// Epoch (1-based) whose parameters were kept; 0 means the final ones.
    pub best_epoch: usize,
}

pub fn steps_per_epoch(n_items: usize, batch_size: usize) -> u64 {
    n_items.div_ceil(batch_size) as u64
}

/// Scores parameters after each epoch; higher is better.
pub type Validator<'a> = &'a mut dyn FnMut(&DecoderParameters) -> Result<f64>;

/// Runs `cfg.epochs` shuffled epochs. With a validator, the parameters with
/// the highest validation score (earliest on ties) are returned.
pub fn train(
    mut params: DecoderParameters,
    set: &TrainingSet,
    bank: &ConceptBank,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
    mut validator: Option<Validator<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let needed = set.items.iter().map(|it| it.ids.len() + 1).max().unwrap_or(0) + cfg.k_prompts;
    if !set.is_empty() && needed > params.config().max_len {
        return Err(Error::Capacity {
            needed,
            max_len: params.config().max_len,
        });
    }
    let streams = SeedStreams::new(cfg.seed);
    let total_steps = cfg.epochs as u64 * steps_per_epoch(set.len(), cfg.batch_size);
    let mut opt = OptimizerState::new(&params);
    let mut losses = Vec::with_capacity(total_steps as usize);
    let mut validation = Vec::new();
    let mut best: Option<(f64, usize, DecoderParameters)> = None;
    let start = Instant::now();
    let use_dropout = params.config().dropout > 0.0;
    for epoch in 0..cfg.epochs {
        if set.is_empty() {
            break;
        }
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut streams.indexed("batch-shuffle", epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            let step = opt.t + 1;
            let rngs = StepRngs::for_step(&streams, step, use_dropout);
            let report = train_step(&mut params, &mut opt, set, batch, bank, cfg, total_steps, rngs)?;
            losses.push(report.loss);
            if let Some(w) = log.as_deref_mut() {
                let entry = LogEntry {
                    step,
                    lr: report.lr,
                    loss: report.loss,
                    wall_ms: start.elapsed().as_millis() as u64,
                };
                serde_json::to_writer(&mut *w, &entry)?;
                writeln!(w)?;
            }
            log::debug!("step {step} lr {:.3e} loss {:.5}", report.lr, report.loss);
        }
        if let Some(v) = validator.as_deref_mut() {
            let score = v(&params)?;
            log::info!("epoch {} validation {score:.4}", epoch + 1);
            validation.push(score);
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, epoch + 1, params.clone()));
            }
        }
    }
    let (params, best_epoch) = match best {
        Some((_, e, p)) => (p, e),
        None => (params, 0),
    };
    Ok(TrainOutcome {
        params,
        steps: opt.t,
        losses,
        validation,
        best_epoch,
    })
}

/// Continues training on vision/caption pairs: pooled vision features
/// replace text features, prompts are retrieved from them, and neither input
/// nor feature augmentation is applied.
pub fn fine_tune_paired(
    params: DecoderParameters,
    pairs: &TrainingSet,
    bank: &ConceptBank,
    cfg: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        mode: TrainMode::Paired,
        ..cfg.clone()
    };
    train(params, pairs, bank, &cfg, log, None)
}
