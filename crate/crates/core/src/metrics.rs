//! Corpus-level caption metrics: BLEU-4, ROUGE-L and CIDEr-D, following the
//! conventions of the COCO caption evaluation toolkit.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
const MAX_N: usize = 4;

/// Lowercases, strips punctuation characters and splits on whitespace.
pub fn eval_tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !is_punct(*c))
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2010}'..='\u{2027}' | '\u{3001}'..='\u{3003}' | '\u{3008}'..='\u{3011}' | '\u{ff01}' | '\u{ff0c}'
                | '\u{ff0e}' | '\u{ff1a}' | '\u{ff1b}' | '\u{ff1f}' | '\u{00a1}' | '\u{00bf}' | '\u{00ab}'
                | '\u{00bb}'
        )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalItem {
    pub id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

/// Candidates with their references; ids are unique and every item has at
/// least one reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCorpus {
    items: Vec<EvalItem>,
}

impl EvalCorpus {
    pub fn new(items: Vec<EvalItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyInput("evaluation corpus has no items".into()));
        }
        let mut seen = HashSet::new();
        for it in &items {
            if !seen.insert(it.id.as_str()) {
                return Err(Error::Data(format!("duplicate evaluation id {:?}", it.id)));
            }
            if it.references.is_empty() {
                return Err(Error::Data(format!("item {:?} has no references", it.id)));
            }
        }
        Ok(EvalCorpus { items })
    }

    /// Builds a corpus from raw strings with [`eval_tokenize`].
    pub fn from_text<I, S>(items: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, S, Vec<S>)>,
        S: AsRef<str>,
    {
        Self::new(
            items
                .into_iter()
                .map(|(id, cand, refs)| EvalItem {
                    id: id.as_ref().to_string(),
                    candidate: eval_tokenize(cand.as_ref()),
                    references: refs.iter().map(|r| eval_tokenize(r.as_ref())).collect(),
                })
                .collect(),
        )
    }

    pub fn items(&self) -> &[EvalItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Ordered so that floating-point sums over n-grams are reproducible.
type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut c = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *c.entry(w).or_default() += 1;
        }
    }
    c
}

/// Corpus BLEU-4: clipped n-gram counts pooled over items, uniform weights,
/// brevity penalty against the closest reference length (shorter on ties),
/// no smoothing.
pub fn bleu4(corpus: &EvalCorpus) -> f64 {
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for it in &corpus.items {
        let c = it.candidate.len();
        cand_len += c;
        ref_len += it
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .expect("non-empty references");
        for n in 1..=MAX_N {
            let cand = ngrams(&it.candidate, n);
            let mut max_ref: Counts = BTreeMap::new();
            for r in &it.references {
                for (g, k) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &cand {
                matched[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if cand_len == 0 || matched.contains(&0) {
        return 0.0;
    }
    let log_p: f64 = (0..MAX_N)
        .map(|i| (matched[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / MAX_N as f64;
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    bp * log_p.exp()
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure of one candidate against one reference.
pub fn rouge_l_pair(cand: &[String], reference: &[String]) -> f64 {
    let l = lcs_len(cand, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / cand.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over items of the best per-reference LCS F-measure (β = 1.2).
pub fn rouge_l(corpus: &EvalCorpus) -> f64 {
    let sum: f64 = corpus
        .items
        .iter()
        .map(|it| {
            it.references
                .iter()
                .map(|r| rouge_l_pair(&it.candidate, r))
                .fold(0.0, f64::max)
        })
        .sum();
    sum / corpus.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiderScore {
    pub score: f64,
    /// Set for single-item corpora, where every document frequency equals
    /// the corpus size and all tf-idf weights vanish.
    pub degenerate_idf: bool,
}

struct TfIdf<'a> {
    vecs: Vec<BTreeMap<&'a [String], f64>>,
    norms: Vec<f64>,
    /// Number of bigrams.
    length: usize,
}

fn tfidf<'a>(tokens: &'a [String], df: &HashMap<&'a [String], usize>, log_n: f64) -> TfIdf<'a> {
    let mut vecs = Vec::with_capacity(MAX_N);
    let mut norms = Vec::with_capacity(MAX_N);
    for n in 1..=MAX_N {
        let v: BTreeMap<&[String], f64> = ngrams(tokens, n)
            .into_iter()
            .map(|(g, tf)| {
                let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
                (g, tf as f64 * (log_n - d.ln()))
            })
            .collect();
        norms.push(v.values().map(|w| w * w).sum::<f64>().sqrt());
        vecs.push(v);
    }
    TfIdf {
        vecs,
        norms,
        length: tokens.len().saturating_sub(1),
    }
}

fn cider_sim(h: &TfIdf, r: &TfIdf) -> f64 {
    let delta = h.length as f64 - r.length as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..MAX_N {
        let mut val: f64 = h.vecs[n]
            .iter()
            .map(|(g, w)| {
                let rw = r.vecs[n].get(g).copied().unwrap_or(0.0);
                w.min(rw) * rw
            })
            .sum();
        if h.norms[n] != 0.0 && r.norms[n] != 0.0 {
            val /= h.norms[n] * r.norms[n];
        }
        total += val * penalty;
    }
    total / MAX_N as f64
}

/// Per-item CIDEr-D scores and the degenerate-IDF flag.
pub fn cider_items(corpus: &EvalCorpus) -> (Vec<f64>, bool) {
    let mut df: HashMap<&[String], usize> = HashMap::new();
    for it in &corpus.items {
        let mut seen: HashSet<&[String]> = HashSet::new();
        for r in &it.references {
            for n in 1..=MAX_N {
                seen.extend(ngrams(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_default() += 1;
        }
    }
    let log_n = (corpus.len() as f64).ln();
    let scores = corpus
        .items
        .iter()
        .map(|it| {
            let h = tfidf(&it.candidate, &df, log_n);
            let sum: f64 = it.references.iter().map(|r| cider_sim(&h, &tfidf(r, &df, log_n))).sum();
            10.0 * sum / it.references.len() as f64
        })
        .collect();
    (scores, corpus.len() < 2)
}

/// Corpus CIDEr-D: the mean of per-item scores.
pub fn cider(corpus: &EvalCorpus) -> CiderScore {
    let (scores, degenerate_idf) = cider_items(corpus);
    if degenerate_idf {
        log::warn!("CIDEr-D on a single item: document frequencies are degenerate");
    }
    CiderScore {
        score: scores.iter().sum::<f64>() / scores.len() as f64,
        degenerate_idf,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub n_items: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate_idf: bool,
}

pub fn evaluate(corpus: &EvalCorpus) -> EvalReport {
    let c = cider(corpus);
    EvalReport {
        bleu4: bleu4(corpus),
        rouge_l: rouge_l(corpus),
        cider: c.score,
        n_items: corpus.len(),
        degenerate_idf: c.degenerate_idf,
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalLine {
    pub id: String,
    pub candidate: String,
    pub references: Vec<String>,
}

pub fn read_eval<R: BufRead>(reader: R) -> Result<EvalCorpus> {
    let mut items = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: EvalLine =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("evaluation line {}: {e}", lineno + 1)))?;
        items.push(EvalItem {
            id: l.id,
            candidate: eval_tokenize(&l.candidate),
            references: l.references.iter().map(|r| eval_tokenize(r)).collect(),
        });
    }
    EvalCorpus::new(items)
}

pub fn load_eval(path: &Path) -> Result<EvalCorpus> {
    let f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    read_eval(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests;
