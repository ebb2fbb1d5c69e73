//! The `multicap` command line. Every subcommand prints one JSON line on
//! success; failures exit with 1 (usage), 2 (data) or 3 (numeric).

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::augment::{build_candidate_sets_grouped, read_candidates, write_candidates};
use crate::concepts::{
    default_stopwords, embed_concepts, extract_concepts, load_concepts, read_stopwords, write_concepts,
};
use crate::corpus::{load_corpus, CaptionRecord};
use crate::decoder::DecoderParameters;
use crate::embedding::{gap_report, retrieve_prompts, ConceptBank, FeatureTable, TextEmbedder, UnitVector};
use crate::error::{Error, Result};
use crate::inference::{caption_greedy_with, caption_with, CaptionLine, DecodeConfig};
use crate::io::checkpoint::{bank_from_mce1, checkpoint_hash, Checkpoint};
use crate::io::{EmbeddingFile, RunConfig};
use crate::metrics::{eval_tokenize, evaluate, load_eval, EvalCorpus, EvalItem};
use crate::rng::SeedStreams;
use crate::testbed::{run_ablation, synth_vision};
use crate::train::{fine_tune_paired, train, TrainConfig, TrainingSet};
use crate::vocab::{Languages, Vocabulary};

#[derive(Debug, Parser)]
#[command(
    name = "multicap",
    version,
    about = "Text-only trained, zero-shot multilingual captioning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Run seed; overrides the configured training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a configuration file with every default spelled out.
    InitConfig {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect concept phrases from a corpus.
    ExtractConcepts {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed corpus sources or concept phrases into an MCE1 file.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "concepts", required_unless_present = "concepts")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        concepts: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nearest-neighbour candidate sets for input augmentation.
    BuildCandidates {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Precomputed text features keyed by record id.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Text-only training; writes a checkpoint directory.
    Train(TrainArgs),
    /// Continue training a checkpoint on vision/caption pairs.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Vision features; rows sharing an id are frames of one item.
        #[arg(long)]
        vision: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Caption vision features with a checkpoint.
    Caption {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vision: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Output language; the checkpoint's first language by default.
        #[arg(long)]
        lang: Option<String>,
        #[arg(long, conflicts_with = "greedy")]
        beam: Option<usize>,
        #[arg(long)]
        greedy: bool,
    },
    /// BLEU-4, ROUGE-L and CIDEr-D of captions against references.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// JSON Lines with `id` and `caption` (or a corpus file).
        #[arg(
            long,
            requires = "references",
            conflicts_with = "pairs",
            required_unless_present = "pairs"
        )]
        captions: Option<PathBuf>,
        /// JSON Lines with `id` and `caption` (repeat ids for several
        /// references) or `references`.
        #[arg(long)]
        references: Option<PathBuf>,
        /// JSON Lines with `id`, `candidate` and `references`.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Component ablation on the synthetic-gap testbed.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Modality gap between text and vision features.
    GapReport {
        #[command(flatten)]
        common: Common,
        /// Text features; paired with `--vision` rows by id.
        #[arg(long, requires = "vision", conflicts_with = "corpus")]
        text: Option<PathBuf>,
        #[arg(long)]
        vision: Option<PathBuf>,
        /// Embed this corpus and measure the configured synthetic gap.
        #[arg(long, required_unless_present = "text")]
        corpus: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Concept phrases; extracted from the corpus when omitted.
    #[arg(long, conflicts_with = "bank")]
    pub concepts: Option<PathBuf>,
    /// Precomputed concept embeddings (MCE1, ids are phrases).
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Precomputed text features keyed by record id.
    #[arg(long, requires = "bank")]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Training log, one JSON object per step.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Validation captions; the epoch with the best CIDEr is kept.
    #[arg(long, requires = "val_vision")]
    pub val_corpus: Option<PathBuf>,
    #[arg(long)]
    pub val_vision: Option<PathBuf>,
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::InitConfig { common, .. }
            | Command::ExtractConcepts { common, .. }
            | Command::Embed { common, .. }
            | Command::BuildCandidates { common, .. }
            | Command::Train(TrainArgs { common, .. })
            | Command::Finetune { common, .. }
            | Command::Caption { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Ablate { common, .. }
            | Command::GapReport { common, .. } => common,
        }
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    init_logging(cli.command.common().verbose);
    match execute(&cli.command) {
        Ok(v) => {
            let _ = writeln!(out, "{v}");
            0
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.kind().exit_code()
        }
    }
}

pub fn execute(command: &Command) -> Result<Value> {
    let common = command.common();
    let config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match command {
        Command::InitConfig { out, .. } => {
            write_bytes(out, config.to_json().as_bytes())?;
            Ok(json!({ "config": out }))
        }
        Command::ExtractConcepts { corpus, out, .. } => {
            let records = load_corpus(corpus, &config.languages)?;
            let stop = stopwords(&config)?;
            let vocab = extract_concepts(&records, config.concepts.cap, &stop, config.concepts.max_len)?;
            let mut buf = Vec::new();
            write_concepts(&mut buf, &vocab)?;
            write_bytes(out, &buf)?;
            Ok(json!({ "concepts": vocab.len(), "out": out }))
        }
        Command::Embed {
            corpus, concepts, out, ..
        } => {
            let emb = &config.embedder;
            let (ids, vectors) = if let Some(c) = corpus {
                let records = load_corpus(c, &config.languages)?;
                let v = records
                    .iter()
                    .map(|r| embed_record(emb, r))
                    .collect::<Result<Vec<_>>>()?;
                (records.into_iter().map(|r| r.id).collect(), v)
            } else {
                let path = concepts.as_ref().expect("clap requires corpus or concepts");
                let bank = embed_concepts(&load_concepts(path)?, emb)?;
                let ids = bank.concepts().iter().map(|c| c.surface.clone()).collect();
                (ids, bank.concepts().iter().map(|c| c.feature.clone()).collect())
            };
            let file = EmbeddingFile::from_unit_vectors(ids, &vectors)?;
            file.save(out)?;
            Ok(json!({ "rows": file.len(), "dim": file.dim(), "out": out }))
        }
        Command::BuildCandidates {
            corpus, features, out, ..
        } => {
            let records = load_corpus(corpus, &config.languages)?;
            let feats = match features {
                Some(p) => features_by_record(&records, &EmbeddingFile::load(p)?)?,
                None => records
                    .iter()
                    .map(|r| embed_record(&config.embedder, r))
                    .collect::<Result<Vec<_>>>()?,
            };
            let groups: Vec<&str> = records.iter().map(|r| r.lang.as_str()).collect();
            let n = config.train.n_candidates;
            let sets = build_candidate_sets_grouped(&feats, &groups, n)?;
            let mut buf = Vec::new();
            write_candidates(&mut buf, &sets)?;
            write_bytes(out, &buf)?;
            Ok(json!({ "sets": sets.len(), "n": n, "out": out }))
        }
        Command::Train(args) => cmd_train(&config, args),
        Command::Finetune {
            checkpoint,
            corpus,
            vision,
            out,
            log,
            ..
        } => cmd_finetune(&config, common, checkpoint, corpus, vision, out, log.as_deref()),
        Command::Caption {
            checkpoint,
            vision,
            out,
            lang,
            beam,
            greedy,
            ..
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let lang_id = match lang {
                Some(l) => ck.languages.id(l)?,
                None => 0,
            };
            let decode = DecodeConfig {
                beam_size: beam.unwrap_or(config.decode.beam_size),
                ..config.decode
            };
            decode.validate()?;
            let items = grouped_frames(&EmbeddingFile::load(vision)?)?;
            let mut buf = Vec::new();
            for (id, frames) in &items {
                let feature = crate::embedding::pool_frames(frames)?;
                let prompts = retrieve_prompts(&feature, &ck.bank, ck.k_prompts)?;
                let c = if *greedy {
                    caption_greedy_with(&feature, prompts, lang_id, &ck.params, decode.max_len)?
                } else {
                    caption_with(&feature, prompts, lang_id, &ck.params, &decode)?
                };
                let line = CaptionLine {
                    id: id.clone(),
                    caption: ck.vocab.decode(&c.tokens).join(" "),
                    prompts: c.prompts.surfaces(&ck.bank).into_iter().map(String::from).collect(),
                    logprob: c.logprob,
                };
                serde_json::to_writer(&mut buf, &line)?;
                buf.push(b'\n');
            }
            write_bytes(out, &buf)?;
            Ok(json!({ "captions": items.len(), "out": out }))
        }
        Command::Evaluate {
            captions,
            references,
            pairs,
            out,
            ..
        } => {
            let corpus = match (pairs, captions, references) {
                (Some(p), _, _) => load_eval(p)?,
                (None, Some(c), Some(r)) => join_eval(c, r)?,
                _ => {
                    return Err(Error::Argument(
                        "give --pairs or both --captions and --references".into(),
                    ))
                }
            };
            let report = evaluate(&corpus);
            if let Some(o) = out {
                write_bytes(o, &serde_json::to_vec_pretty(&report)?)?;
            }
            Ok(serde_json::to_value(report)?)
        }
        Command::Ablate { out, .. } => {
            let mut settings = config.ablation.clone();
            if let Some(s) = common.seed {
                settings.corpus_seed = s;
            }
            let report = run_ablation(&settings)?;
            if let Some(o) = out {
                write_bytes(o, &serde_json::to_vec_pretty(&report)?)?;
            }
            Ok(json!({ "summary": report.summary, "failures": report.failures(), "out": out }))
        }
        Command::GapReport {
            text, vision, corpus, ..
        } => {
            let (t, v) = if let (Some(t), Some(v)) = (text, vision) {
                paired_by_id(&EmbeddingFile::load(t)?, &EmbeddingFile::load(v)?)?
            } else {
                let path = corpus.as_ref().expect("clap requires text or corpus");
                let records = load_corpus(path, &config.languages)?;
                let t = records
                    .iter()
                    .map(|r| embed_record(&config.embedder, r))
                    .collect::<Result<Vec<_>>>()?;
                let mut rng = SeedStreams::new(seed(&config, common)).stream("gap");
                let v = t
                    .iter()
                    .map(|f| synth_vision(f, &config.gap, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                (t, v)
            };
            let pairs: Vec<(usize, usize)> = (0..t.len()).map(|i| (i, i)).collect();
            let report = gap_report(&t, &v, &pairs)?;
            Ok(
                json!({ "pairs": pairs.len(), "centroid_distance": report.centroid_distance, "mean_paired_cosine": report.mean_paired_cosine }),
            )
        }
    }
}

fn seed(config: &RunConfig, common: &Common) -> u64 {
    common.seed.unwrap_or(config.train.seed)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

fn stopwords(config: &RunConfig) -> Result<std::collections::HashSet<String>> {
    match &config.concepts.stopwords {
        Some(p) => {
            let f = File::open(p).map_err(|e| Error::file(p, e))?;
            read_stopwords(BufReader::new(f))
        }
        None => Ok(config.languages.iter().flat_map(|l| default_stopwords(l)).collect()),
    }
}

fn embed_record(emb: &dyn TextEmbedder, r: &CaptionRecord) -> Result<UnitVector> {
    emb.embed(&r.source).map_err(|e| Error::Embed {
        phrase: r.source_text(),
        source: Box::new(e),
    })
}

/// One feature per record, looked up by record id.
fn features_by_record(records: &[CaptionRecord], file: &EmbeddingFile) -> Result<Vec<UnitVector>> {
    let (vectors, _) = file.unit_vectors()?;
    let index: HashMap<&str, usize> = file.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    records
        .iter()
        .map(|r| {
            index
                .get(r.id.as_str())
                .map(|&i| vectors[i].clone())
                .ok_or_else(|| Error::Data(format!("no feature for record {:?}", r.id)))
        })
        .collect()
}

/// Rows grouped by id, in order of first appearance.
fn grouped_frames(file: &EmbeddingFile) -> Result<Vec<(String, Vec<UnitVector>)>> {
    let (vectors, _) = file.unit_vectors()?;
    let mut order: Vec<(String, Vec<UnitVector>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (id, v) in file.ids().iter().zip(vectors) {
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            order.push((id.clone(), Vec::new()));
            order.len() - 1
        });
        order[slot].1.push(v);
    }
    if order.is_empty() {
        return Err(Error::EmptyInput("vision file has no rows".into()));
    }
    Ok(order)
}

/// Text rows matched to pooled vision frames with the same id.
fn paired_by_id(text: &EmbeddingFile, vision: &EmbeddingFile) -> Result<(Vec<UnitVector>, Vec<UnitVector>)> {
    let (tv, _) = text.unit_vectors()?;
    let frames: HashMap<String, Vec<UnitVector>> = grouped_frames(vision)?.into_iter().collect();
    let mut t = Vec::new();
    let mut v = Vec::new();
    for (id, f) in text.ids().iter().zip(tv) {
        if let Some(fr) = frames.get(id) {
            t.push(f);
            v.push(crate::embedding::pool_frames(fr)?);
        }
    }
    if t.is_empty() {
        return Err(Error::Data("no ids are shared by the text and vision files".into()));
    }
    Ok((t, v))
}

/// A caption, corpus or reference line; other fields are ignored.
#[derive(Deserialize)]
struct TextLine {
    id: String,
    #[serde(default, alias = "source")]
    caption: Option<String>,
    #[serde(default)]
    target: Option<String>,
    #[serde(default)]
    references: Vec<String>,
}

impl TextLine {
    fn text(&self) -> Option<&String> {
        self.target.as_ref().or(self.caption.as_ref())
    }
}

fn read_text_lines(path: &Path) -> Result<Vec<TextLine>> {
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn join_eval(captions: &Path, references: &Path) -> Result<EvalCorpus> {
    let mut refs: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    for l in read_text_lines(references)? {
        let e = refs.entry(l.id.clone()).or_default();
        e.extend(l.text().into_iter().chain(&l.references).map(|r| eval_tokenize(r)));
    }
    let mut items = Vec::new();
    for l in read_text_lines(captions)? {
        let cand = l
            .text()
            .cloned()
            .ok_or_else(|| Error::Data(format!("caption line for {:?} has no caption", l.id)))?;
        let r = refs
            .get(&l.id)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no references for {:?}", l.id)))?;
        items.push(EvalItem {
            id: l.id,
            candidate: eval_tokenize(&cand),
            references: r,
        });
    }
    EvalCorpus::new(items)
}

/// Validation scenes for epoch selection: references grouped by id and
/// their pooled vision features.
struct Validation {
    ids: Vec<String>,
    features: Vec<UnitVector>,
    references: BTreeMap<String, Vec<Vec<String>>>,
}

fn load_validation(config: &RunConfig, corpus: &Path, vision: &Path) -> Result<Validation> {
    let records = load_corpus(corpus, &config.languages)?;
    let mut references: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    for r in &records {
        references
            .entry(r.id.clone())
            .or_default()
            .push(eval_tokenize(&r.output_tokens().join(" ")));
    }
    let mut ids = Vec::new();
    let mut features = Vec::new();
    for (id, frames) in grouped_frames(&EmbeddingFile::load(vision)?)? {
        if references.contains_key(&id) {
            features.push(crate::embedding::pool_frames(&frames)?);
            ids.push(id);
        }
    }
    if ids.is_empty() {
        return Err(Error::Data("validation vision ids match no validation captions".into()));
    }
    Ok(Validation {
        ids,
        features,
        references,
    })
}

fn validation_cider(
    val: &Validation,
    params: &DecoderParameters,
    vocab: &Vocabulary,
    bank: &ConceptBank,
    k: usize,
    decode: &DecodeConfig,
) -> Result<f64> {
    let mut items = Vec::with_capacity(val.ids.len());
    for (id, f) in val.ids.iter().zip(&val.features) {
        let c = caption_with(f, retrieve_prompts(f, bank, k)?, 0, params, decode)?;
        items.push(EvalItem {
            id: id.clone(),
            candidate: eval_tokenize(&vocab.decode(&c.tokens).join(" ")),
            references: val.references[id].clone(),
        });
    }
    Ok(evaluate(&EvalCorpus::new(items)?).cider)
}

fn build_vocab(config: &RunConfig, records: &[CaptionRecord]) -> Result<Vocabulary> {
    match &config.vocab.file {
        Some(p) => {
            let f = File::open(p).map_err(|e| Error::file(p, e))?;
            Vocabulary::read(BufReader::new(f))
        }
        None => Vocabulary::build(records, config.vocab.min_count, config.vocab.max_size),
    }
}

fn open_log(path: Option<&Path>) -> Result<Option<BufWriter<File>>> {
    path.map(|p| File::create(p).map(BufWriter::new).map_err(|e| Error::file(p, e)))
        .transpose()
}

fn cmd_train(config: &RunConfig, args: &TrainArgs) -> Result<Value> {
    let seed = seed(config, &args.common);
    let languages = config.languages()?;
    let records = load_corpus(&args.corpus, &config.languages)?;
    let vocab = build_vocab(config, &records)?;
    let bank = match (&args.bank, &args.concepts) {
        (Some(b), _) => bank_from_mce1(&EmbeddingFile::load(b)?)?,
        (None, Some(c)) => embed_concepts(&load_concepts(c)?, &config.embedder)?,
        (None, None) => {
            let stop = stopwords(config)?;
            let concepts = extract_concepts(&records, config.concepts.cap, &stop, config.concepts.max_len)?;
            embed_concepts(&concepts, &config.embedder)?
        }
    };
    let cfg = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let mut set = match &args.features {
        Some(p) => {
            let feats = features_by_record(&records, &EmbeddingFile::load(p)?)?;
            let dim = feats[0].dim();
            let table = FeatureTable::new(dim, records.iter().map(|r| r.source_text()).zip(feats))?;
            TrainingSet::text_only(&records, &table, &vocab, &languages, cfg.n_candidates)?
        }
        None => TrainingSet::text_only(&records, &config.embedder, &vocab, &languages, cfg.n_candidates)?,
    };
    if let Some(p) = &args.candidates {
        let f = File::open(p).map_err(|e| Error::file(p, e))?;
        set.candidates = read_candidates(BufReader::new(f), records.len())?;
    }
    let d_clip = set.items[0].feature.dim();
    if bank.dim() != d_clip {
        return Err(Error::Dimension(format!(
            "concept bank has dimension {} but text features {d_clip}",
            bank.dim()
        )));
    }
    let dc = config.model.with_data(vocab.len(), languages.len(), d_clip);
    let params = DecoderParameters::init(dc, &mut SeedStreams::new(seed).stream("init"))?;
    let val = match (&args.val_corpus, &args.val_vision) {
        (Some(c), Some(v)) => Some(load_validation(config, c, v)?),
        _ => None,
    };
    let mut validate = |p: &DecoderParameters| {
        validation_cider(
            val.as_ref().expect("set"),
            p,
            &vocab,
            &bank,
            cfg.k_prompts,
            &config.decode,
        )
    };
    let validator: Option<crate::train::Validator> = if val.is_some() { Some(&mut validate) } else { None };
    let mut log = open_log(args.log.as_deref())?;
    let outcome = train(
        params,
        &set,
        &bank,
        &cfg,
        log.as_mut().map(|w| w as &mut dyn Write),
        validator,
    )?;
    if let Some(mut w) = log {
        w.flush()?;
    }
    let ck = Checkpoint {
        params: outcome.params,
        vocab,
        languages,
        bank,
        k_prompts: cfg.k_prompts,
        step: outcome.steps,
        seed,
    };
    ck.save(&args.out)?;
    Ok(json!({
        "checkpoint": args.out,
        "hash": checkpoint_hash(&args.out)?,
        "steps": outcome.steps,
        "final_loss": outcome.losses.last(),
        "best_epoch": outcome.best_epoch,
    }))
}

fn cmd_finetune(
    config: &RunConfig,
    common: &Common,
    checkpoint: &Path,
    corpus: &Path,
    vision: &Path,
    out: &Path,
    log: Option<&Path>,
) -> Result<Value> {
    let ck = Checkpoint::load(checkpoint)?;
    let languages: Vec<String> = ck.languages.names().to_vec();
    let records = load_corpus(corpus, &languages)?;
    ck.check_vocabulary(&build_vocab(config, &records)?)?;
    let frames: HashMap<String, Vec<UnitVector>> = grouped_frames(&EmbeddingFile::load(vision)?)?.into_iter().collect();
    let pairs: Vec<(Vec<UnitVector>, CaptionRecord)> = records
        .into_iter()
        .map(|r| (frames.get(&r.id).cloned().unwrap_or_default(), r))
        .collect();
    let set = TrainingSet::paired(&pairs, &ck.vocab, &ck.languages)?;
    let seed = seed(config, common);
    let cfg = TrainConfig {
        seed,
        k_prompts: ck.k_prompts,
        ..config.train.clone()
    };
    let mut log = open_log(log)?;
    let outcome = fine_tune_paired(
        ck.params,
        &set,
        &ck.bank,
        &cfg,
        log.as_mut().map(|w| w as &mut dyn Write),
    )?;
    if let Some(mut w) = log {
        w.flush()?;
    }
    let tuned = Checkpoint {
        params: outcome.params,
        step: ck.step + outcome.steps,
        seed,
        vocab: ck.vocab,
        languages: Languages::new(languages)?,
        bank: ck.bank,
        k_prompts: ck.k_prompts,
    };
    tuned.save(out)?;
    Ok(json!({
        "checkpoint": out,
        "hash": checkpoint_hash(out)?,
        "steps": outcome.steps,
        "final_loss": outcome.losses.last(),
    }))
}

/// Installs a stderr logger at warn level, raised by `-v`.
pub fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
}
