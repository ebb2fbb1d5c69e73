//! The trainable language model: token/position/language embeddings, the
//! prompt projector ω, the feature projector ω′, pre-norm decoder blocks with
//! masked self-attention and cross-attention, and the vocabulary head.
//!
//! The decoder input is `Concat(ω(P), e(S))`. Prompt rows are visible to
//! every position and only attend to each other; token row `i` attends to all
//! prompts and to tokens `<= i`. Every block cross-attends to the single
//! memory row `ω′(f)` built from the global feature.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::embedding::{PromptSet, UnitVector};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Capacity in rows: prompts plus tokens.
    pub max_len: usize,
    pub n_languages: usize,
    /// Dimension of the shared embedding space.
    pub d_clip: usize,
    pub dropout: f64,
}

/// Size hyper-parameters independent of data (vocabulary, languages and
/// feature dimension are filled in from the corpus).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl ModelShape {
    /// Transformer-base sized decoder.
    pub fn base() -> Self {
        ModelShape {
            d_model: 512,
            n_layers: 6,
            n_heads: 8,
            d_ff: 2048,
            max_len: 64,
            dropout: 0.1,
        }
    }

    /// Small decoder for desk-scale runs and tests.
    pub fn test() -> Self {
        ModelShape {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 64,
            dropout: 0.0,
        }
    }

    pub fn with_data(self, vocab_size: usize, n_languages: usize, d_clip: usize) -> DecoderConfig {
        DecoderConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
            n_languages,
            d_clip,
            dropout: self.dropout,
        }
    }
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape::base()
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("n_languages", self.n_languages),
            ("d_clip", self.d_clip),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Argument(format!("decoder {name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Argument(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= UNK + 1 {
            return Err(Error::Argument("vocabulary must extend past the special tokens".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Argument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Projector {
    linear: Linear,
    norm: Norm,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln_self: Norm,
    self_attn: Attention,
    ln_cross: Norm,
    cross_attn: Attention,
    ln_ff: Norm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    tok: usize,
    pos: usize,
    lang: usize,
    emb_norm: Norm,
    prompt_proj: Projector,
    feature_proj: Projector,
    blocks: Vec<Block>,
    final_norm: Norm,
    head: Linear,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.add(format!("{prefix}.weight"), vec![fan_in, fan_out], Init::Normal),
            b: self.add(format!("{prefix}.bias"), vec![fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            g: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            b: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{prefix}.query"), d, d),
            k: self.linear(&format!("{prefix}.key"), d, d),
            v: self.linear(&format!("{prefix}.value"), d, d),
            o: self.linear(&format!("{prefix}.output"), d, d),
        }
    }

    fn layout(cfg: &DecoderConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
        let d = cfg.d_model;
        let mut b = Builder { specs: Vec::new() };
        let tok = b.add("embed.token".into(), vec![cfg.vocab_size, d], Init::Normal);
        let pos = b.add("embed.position".into(), vec![cfg.max_len, d], Init::Normal);
        let lang = b.add("embed.language".into(), vec![cfg.n_languages, d], Init::Normal);
        let emb_norm = b.norm("embed.norm", d);
        let prompt_proj = Projector {
            linear: b.linear("prompt_proj.linear", cfg.d_clip, d),
            norm: b.norm("prompt_proj.norm", d),
        };
        let feature_proj = Projector {
            linear: b.linear("feature_proj.linear", cfg.d_clip, d),
            norm: b.norm("feature_proj.norm", d),
        };
        let blocks = (0..cfg.n_layers)
            .map(|l| Block {
                ln_self: b.norm(&format!("block{l}.self_norm"), d),
                self_attn: b.attention(&format!("block{l}.self_attn"), d),
                ln_cross: b.norm(&format!("block{l}.cross_norm"), d),
                cross_attn: b.attention(&format!("block{l}.cross_attn"), d),
                ln_ff: b.norm(&format!("block{l}.ff_norm"), d),
                ff_in: b.linear(&format!("block{l}.ff_in"), d, cfg.d_ff),
                ff_out: b.linear(&format!("block{l}.ff_out"), cfg.d_ff, d),
            })
            .collect();
        let final_norm = b.norm("final_norm", d);
        let head = b.linear("head", d, cfg.vocab_size);
        (
            Layout {
                tok,
                pos,
                lang,
                emb_norm,
                prompt_proj,
                feature_proj,
                blocks,
                final_norm,
                head,
            },
            b.specs,
        )
    }
}

/// All trainable weights θ, stored as named tensors in a fixed order.
#[derive(Debug, Clone)]
pub struct DecoderParameters {
    config: DecoderConfig,
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
    layout: Layout,
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    let n = Normal::new(0.0, std).expect("positive std");
    loop {
        let v: f64 = n.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

impl DecoderParameters {
    /// Truncated-normal weights (std 0.02), zero biases, unit norm gains.
    pub fn init<R: Rng + ?Sized>(config: DecoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = Builder::layout(&config);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Normal => (0..n).map(|_| truncated_normal(rng, INIT_STD)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            names.push(name);
            tensors.push(Arc::new(Tensor::new(shape, data)?));
        }
        Ok(DecoderParameters {
            config,
            names,
            tensors,
            layout,
        })
    }

    /// Rebuilds parameters from named tensors, e.g. a loaded checkpoint.
    pub fn from_named(config: DecoderConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = Builder::layout(&config);
        if specs.len() != named.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for ((name, shape, _), (got_name, t)) in specs.into_iter().zip(named) {
            if name != got_name || shape != t.shape() {
                return Err(Error::Data(format!(
                    "parameter {got_name:?} {:?} does not match expected {name:?} {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Numeric(format!("parameter {name:?} is not finite")));
            }
            names.push(name);
            tensors.push(Arc::new(t));
        }
        Ok(DecoderParameters {
            config,
            names,
            tensors,
            layout,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| self.tensor(i))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| self.tensor_mut(i))
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter().map(|t| &**t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    /// Teacher-forced decoder input and targets for one output sentence:
    /// `[BOS, s_1 .. s_n]` predicts `[s_1 .. s_n, EOS]`.
    pub fn teacher_forcing(ids: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let mut input = Vec::with_capacity(ids.len() + 1);
        input.push(BOS);
        input.extend_from_slice(ids);
        let mut target = ids.to_vec();
        target.push(EOS);
        (input, target)
    }

    /// `LN(tok[s_i] + pos[i] + lang)` for every token.
    pub fn embed_sequence(&self, tokens: &[usize], lang: usize) -> Result<Tensor> {
        let mut f = Forward::new(self, false, None);
        let v = f.embed_sequence(tokens, lang)?;
        Ok(f.graph.value(v).clone())
    }

    /// `Concat(ω(P), e(S))`.
    pub fn build_input(&self, prompts: &PromptSet, tokens: &[usize], lang: usize) -> Result<InputSequence> {
        let mut f = Forward::new(self, false, None);
        let v = f.build_input(prompts, tokens, lang)?;
        Ok(InputSequence {
            embeddings: f.graph.value(v).clone(),
            prompt_len: prompts.len(),
            token_ids: tokens.to_vec(),
            lang,
        })
    }

    /// Next-token distributions for every token position of `input`.
    pub fn forward(&self, input: &InputSequence, global: &UnitVector) -> Result<Tensor> {
        let mut f = Forward::new(self, false, None);
        let x = f.graph.constant(input.embeddings.clone());
        let logits = f.logits(x, input.prompt_len, global)?;
        let probs = f.graph.softmax(logits, None)?;
        Ok(f.graph.value(probs).clone())
    }

    /// Log-probabilities of the next token after `tokens` (which start with BOS).
    pub fn next_log_probs(
        &self,
        prompts: &PromptSet,
        global: &UnitVector,
        tokens: &[usize],
        lang: usize,
    ) -> Result<Vec<f64>> {
        let mut f = Forward::new(self, false, None);
        let x = f.build_input(prompts, tokens, lang)?;
        let logits = f.logits(x, prompts.len(), global)?;
        let t = f.graph.value(logits);
        let row = t.row(t.rows() - 1);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        Ok(row.iter().map(|v| v - lse).collect())
    }
}

/// A decoder input: `K` prompt rows followed by `L` token rows.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSequence {
    pub embeddings: Tensor,
    pub prompt_len: usize,
    pub token_ids: Vec<usize>,
    pub lang: usize,
}

/// One forward pass recorded on a fresh [`Graph`]. Parameters are bound as
/// shared leaves; with `trainable` set they collect gradients.
pub struct Forward<'a> {
    params: &'a DecoderParameters,
    pub graph: Graph,
    vars: Vec<Var>,
    dropout: Option<StreamRng>,
}

impl<'a> Forward<'a> {
    /// `dropout_rng` enables dropout at the configured rate; pass `None` for
    /// evaluation.
    pub fn new(params: &'a DecoderParameters, trainable: bool, dropout_rng: Option<StreamRng>) -> Self {
        let mut graph = Graph::new();
        let vars = params
            .tensors
            .iter()
            .map(|t| graph.shared_leaf(Arc::clone(t), trainable))
            .collect();
        Forward {
            params,
            graph,
            vars,
            dropout: dropout_rng,
        }
    }

    /// The graph handle of parameter `i`.
    pub fn param_var(&self, i: usize) -> Var {
        self.vars[i]
    }

    /// Gradients of every parameter after `graph.backward`, zeros where the
    /// output does not depend on a parameter.
    pub fn gradients(&self) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(&self.params.tensors)
            .map(|(v, t)| {
                self.graph
                    .grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.len()])
            })
            .collect()
    }

    fn p(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn cfg(&self) -> &DecoderConfig {
        &self.params.config
    }

    fn drop(&mut self, x: Var) -> Result<Var> {
        let rate = self.cfg().dropout;
        match self.dropout.as_mut() {
            Some(rng) if rate > 0.0 => self.graph.dropout(x, rate, rng),
            _ => Ok(x),
        }
    }

    fn linear(&mut self, x: Var, l: Linear) -> Result<Var> {
        let y = self.graph.matmul(x, self.p(l.w))?;
        self.graph.add_row(y, self.p(l.b))
    }

    fn norm(&mut self, x: Var, n: Norm) -> Result<Var> {
        self.graph.layer_norm(x, self.p(n.g), self.p(n.b), LN_EPS)
    }

    fn project(&mut self, rows: Vec<f64>, n_rows: usize, proj: Projector) -> Result<Var> {
        let d = self.cfg().d_clip;
        let x = self.graph.constant(Tensor::matrix(n_rows, d, rows)?);
        let y = self.linear(x, proj.linear)?;
        self.norm(y, proj.norm)
    }

    pub fn embed_sequence(&mut self, tokens: &[usize], lang: usize) -> Result<Var> {
        let cfg = self.cfg().clone();
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence".into()));
        }
        if tokens.len() > cfg.max_len {
            return Err(Error::Capacity {
                needed: tokens.len(),
                max_len: cfg.max_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Vocabulary(format!(
                "token id {bad} outside a vocabulary of {}",
                cfg.vocab_size
            )));
        }
        if lang >= cfg.n_languages {
            return Err(Error::Vocabulary(format!(
                "language id {lang} outside {} languages",
                cfg.n_languages
            )));
        }
        let lay = &self.params.layout;
        let (tok, pos, lang_t, emb_norm) = (lay.tok, lay.pos, lay.lang, lay.emb_norm);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let t = self.graph.embedding(self.p(tok), tokens)?;
        let p = self.graph.embedding(self.p(pos), &positions)?;
        let l = self.graph.embedding(self.p(lang_t), &vec![lang; tokens.len()])?;
        let s = self.graph.add(t, p)?;
        let s = self.graph.add(s, l)?;
        self.norm(s, emb_norm)
    }

    /// `ω(P)`, one row per prompt, or `None` when the prompt set is empty.
    pub fn project_prompts(&mut self, prompts: &PromptSet) -> Result<Option<Var>> {
        if prompts.is_empty() {
            return Ok(None);
        }
        if prompts.dim() != self.cfg().d_clip {
            return Err(Error::Dimension(format!(
                "prompts of dimension {} for a decoder expecting {}",
                prompts.dim(),
                self.cfg().d_clip
            )));
        }
        let rows: Vec<f64> = prompts.features().iter().flat_map(|f| f.values().to_vec()).collect();
        let proj = self.params.layout.prompt_proj;
        self.project(rows, prompts.len(), proj).map(Some)
    }

    pub fn build_input(&mut self, prompts: &PromptSet, tokens: &[usize], lang: usize) -> Result<Var> {
        let needed = prompts.len() + tokens.len();
        if needed > self.cfg().max_len {
            return Err(Error::Capacity {
                needed,
                max_len: self.cfg().max_len,
            });
        }
        let prefix = self.project_prompts(prompts)?;
        if tokens.is_empty() {
            return prefix.ok_or_else(|| Error::EmptyInput("no prompts and no tokens".into()));
        }
        let emb = self.embed_sequence(tokens, lang)?;
        match prefix {
            Some(p) => self.graph.concat_rows(&[p, emb]),
            None => Ok(emb),
        }
    }

    fn multi_head(&mut self, x: Var, memory: Var, attn: Attention, mask: Option<&[bool]>) -> Result<Var> {
        let heads = self.cfg().n_heads;
        let dh = self.cfg().d_model / heads;
        let q = self.linear(x, attn.q)?;
        let k = self.linear(memory, attn.k)?;
        let v = self.linear(memory, attn.v)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.graph.slice_cols(q, h * dh, dh)?;
            let kh = self.graph.slice_cols(k, h * dh, dh)?;
            let vh = self.graph.slice_cols(v, h * dh, dh)?;
            outs.push(self.graph.attention(qh, kh, vh, mask)?);
        }
        let cat = if heads == 1 {
            outs[0]
        } else {
            self.graph.concat_cols(&outs)?
        };
        self.linear(cat, attn.o)
    }

    /// Logits `L×V` for the token rows of `input` (which holds `prompt_len`
    /// prompt rows first).
    pub fn logits(&mut self, input: Var, prompt_len: usize, global: &UnitVector) -> Result<Var> {
        let cfg = self.cfg().clone();
        if global.dim() != cfg.d_clip {
            return Err(Error::Dimension(format!(
                "global feature of dimension {} for a decoder expecting {}",
                global.dim(),
                cfg.d_clip
            )));
        }
        let total = self.graph.value(input).rows();
        if self.graph.value(input).cols() != cfg.d_model {
            return Err(Error::Dimension(format!(
                "input rows of width {} for d_model {}",
                self.graph.value(input).cols(),
                cfg.d_model
            )));
        }
        if total <= prompt_len {
            return Err(Error::EmptyInput("input has no token rows".into()));
        }
        let mut mask = vec![false; total * total];
        for r in 0..total {
            for c in 0..total {
                mask[r * total + c] = c < prompt_len || (r >= prompt_len && c <= r);
            }
        }
        let layout = self.params.layout.clone();
        let memory = self.project(global.values().to_vec(), 1, layout.feature_proj)?;

        let mut x = self.drop(input)?;
        for block in &layout.blocks {
            let h = self.norm(x, block.ln_self)?;
            let h = self.multi_head(h, h, block.self_attn, Some(&mask))?;
            let h = self.drop(h)?;
            x = self.graph.add(x, h)?;

            let h = self.norm(x, block.ln_cross)?;
            let h = self.multi_head(h, memory, block.cross_attn, None)?;
            let h = self.drop(h)?;
            x = self.graph.add(x, h)?;

            let h = self.norm(x, block.ln_ff)?;
            let h = self.linear(h, block.ff_in)?;
            let h = self.graph.gelu(h);
            let h = self.linear(h, block.ff_out)?;
            let h = self.drop(h)?;
            x = self.graph.add(x, h)?;
        }
        let tokens = self.graph.slice_rows(x, prompt_len, total - prompt_len)?;
        let h = self.norm(tokens, layout.final_norm)?;
        let logits = self.linear(h, layout.head)?;
        if !self.graph.value(logits).is_finite() {
            return Err(Error::Numeric("decoder produced non-finite logits".into()));
        }
        Ok(logits)
    }
}

impl Forward<'_> {
    /// Teacher-forced logits for one output sentence and the matching
    /// targets (`ids` followed by EOS).
    pub fn teacher_logits(
        &mut self,
        prompts: &PromptSet,
        global: &UnitVector,
        ids: &[usize],
        lang: usize,
    ) -> Result<(Var, Vec<usize>)> {
        let (input, target) = DecoderParameters::teacher_forcing(ids);
        let x = self.build_input(prompts, &input, lang)?;
        let logits = self.logits(x, prompts.len(), global)?;
        Ok((logits, target))
    }
}

/// One conditioned output sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub prompts: PromptSet,
    pub global: UnitVector,
    pub ids: Vec<usize>,
    pub lang: usize,
}

/// Mean smoothed cross entropy over all target tokens of `batch` and, when
/// `with_grads` is set, the gradient of every parameter tensor.
pub fn batch_loss(
    params: &DecoderParameters,
    batch: &[Example],
    smoothing: f64,
    dropout_rng: Option<StreamRng>,
    with_grads: bool,
) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    let mut f = Forward::new(params, with_grads, dropout_rng);
    let mut parts = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for ex in batch {
        let (logits, t) = f.teacher_logits(&ex.prompts, &ex.global, &ex.ids, ex.lang)?;
        parts.push(logits);
        targets.extend(t);
    }
    let logits = if parts.len() == 1 {
        parts[0]
    } else {
        f.graph.concat_rows(&parts)?
    };
    let loss = f.graph.cross_entropy(logits, &targets, smoothing, PAD)?;
    let value = f.graph.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    if !with_grads {
        return Ok((value, None));
    }
    f.graph.backward(loss)?;
    Ok((value, Some(f.gradients())))
}

/// Finite-difference agreement for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheck {
    pub name: String,
    pub coords: usize,
    pub rel_err: f64,
}

/// Compares analytic gradients of [`batch_loss`] with central differences
/// of step `h`, on at most `max_coords` randomly chosen coordinates per
/// tensor. The error is `‖a - n‖ / max(‖a‖, ‖n‖, GRAD_FLOOR)` over the
/// sampled coordinates; the floor covers structurally zero gradients such as
/// attention key biases, where both sides are pure roundoff.
pub fn gradient_check<R: Rng + ?Sized>(
    params: &DecoderParameters,
    batch: &[Example],
    smoothing: f64,
    h: f64,
    max_coords: usize,
    rng: &mut R,
) -> Result<Vec<GradientCheck>> {
    let (_, grads) = batch_loss(params, batch, smoothing, None, true)?;
    let grads = grads.expect("gradients requested");
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for (i, grad) in grads.iter().enumerate() {
        let n = grad.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, max_coords).into_vec()
        };
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = params.tensor(i).data()[c];
            probe.tensor_mut(i).data_mut()[c] = orig + h;
            let (up, _) = batch_loss(&probe, batch, smoothing, None, false)?;
            probe.tensor_mut(i).data_mut()[c] = orig - h;
            let (down, _) = batch_loss(&probe, batch, smoothing, None, false)?;
            probe.tensor_mut(i).data_mut()[c] = orig;
            analytic.push(grad[c]);
            numeric.push((up - down) / (2.0 * h));
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let rel_err = norm(&diff) / norm(&analytic).max(norm(&numeric)).max(GRAD_FLOOR);
        out.push(GradientCheck {
            name: params.names()[i].clone(),
            coords: coords.len(),
            rel_err,
        });
    }
    Ok(out)
}
