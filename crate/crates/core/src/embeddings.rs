//! Concept embeddings learned with skip-gram and negative sampling over
//! calendar-window "sentences", plus the two flat featurizations used by the
//! logistic-regression baseline.

use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, ConceptCode, PatientRecord};
use crate::error::{Result, StrafeError};

pub const DEFAULT_WINDOW_DAYS: u32 = 90;

/// Dense index for every known code, most frequent first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyData", into = "VocabularyData")]
pub struct Vocabulary {
    codes: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyData {
    codes: Vec<String>,
    counts: Vec<u64>,
}

impl From<VocabularyData> for Vocabulary {
    fn from(d: VocabularyData) -> Self {
        let index = d.codes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Vocabulary {
            codes: d.codes,
            counts: d.counts,
            index,
        }
    }
}

impl From<Vocabulary> for VocabularyData {
    fn from(v: Vocabulary) -> Self {
        VocabularyData {
            codes: v.codes,
            counts: v.counts,
        }
    }
}

impl Vocabulary {
    /// Builds a vocabulary from `(code, count)` pairs; ties in count are
    /// broken by code so the ordering is deterministic.
    pub fn from_counts(counts: HashMap<String, u64>) -> Self {
        let mut pairs: Vec<(String, u64)> = counts.into_iter().filter(|(_, n)| *n > 0).collect();
        pairs.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let (codes, counts): (Vec<String>, Vec<u64>) = pairs.into_iter().unzip();
        VocabularyData { codes, counts }.into()
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn code(&self, i: usize) -> &str {
        &self.codes[i]
    }

    pub fn count(&self, i: usize) -> u64 {
        self.counts[i]
    }
}

/// One sentence per (patient, window) holding the distinct codes seen in it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SentenceCorpus {
    pub sentences: Vec<Vec<String>>,
}

impl SentenceCorpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Frequency = number of sentences containing the code.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for s in &self.sentences {
            for c in s {
                *counts.entry(c.clone()).or_default() += 1;
            }
        }
        Vocabulary::from_counts(counts)
    }
}

fn patient_sentences(p: &PatientRecord, window_days: u32) -> Vec<Vec<String>> {
    let Some(anchor) = p.visits.iter().map(|v| v.days_before_index).max() else {
        return vec![];
    };
    let mut out: Vec<Vec<String>> = Vec::new();
    let mut current_window = None;
    for v in &p.visits {
        let w = (anchor - v.days_before_index) / window_days;
        if current_window != Some(w) {
            out.push(Vec::new());
            current_window = Some(w);
        }
        let sentence = out.last_mut().expect("pushed above");
        for c in &v.codes {
            if !sentence.iter().any(|s| s == c.as_str()) {
                sentence.push(c.as_str().to_string());
            }
        }
    }
    out
}

/// Groups each patient's visits into consecutive `window_days` windows
/// anchored at their earliest visit. Windows without visits produce nothing.
pub fn build_sentences(cohort: &Cohort, window_days: u32) -> Result<SentenceCorpus> {
    if window_days == 0 {
        return Err(StrafeError::Parameter {
            name: "window_days",
            detail: "must be positive".into(),
        });
    }
    let sentences = cohort
        .patients
        .par_iter()
        .map(|p| patient_sentences(p, window_days))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    Ok(SentenceCorpus { sentences })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub lr: f64,
    pub seed: u64,
    pub window_days: u32,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            dim: 16,
            epochs: 5,
            negatives: 5,
            lr: 0.025,
            seed: 7,
            window_days: DEFAULT_WINDOW_DAYS,
        }
    }
}

impl SkipGramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(StrafeError::Config(format!("embedding dimension {} must be even and positive", self.dim)));
        }
        if self.negatives == 0 {
            return Err(StrafeError::Config("negatives must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(StrafeError::Config("learning rate must be positive".into()));
        }
        if self.window_days == 0 {
            return Err(StrafeError::Config("window_days must be positive".into()));
        }
        Ok(())
    }
}

/// `vocab_size × dim` matrix; row `i` is the vector of `vocab.code(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub vocab: Vocabulary,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(vocab: Vocabulary, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != vocab.len() * dim {
            return Err(StrafeError::dim(
                "embeddings",
                format!("{} values for {} codes × {dim}", data.len(), vocab.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(StrafeError::NonFinite { op: "embeddings" });
        }
        Ok(EmbeddingMatrix { vocab, dim, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// The vector of a code, or `None` when it is out of vocabulary.
    pub fn lookup(&self, code: &str) -> Option<&[f32]> {
        self.vocab.index_of(code).map(|i| self.row(i))
    }

    pub fn cosine(&self, a: &str, b: &str) -> Option<f64> {
        let (x, y) = (self.lookup(a)?, self.lookup(b)?);
        let dot: f64 = x.iter().zip(y).map(|(&p, &q)| p as f64 * q as f64).sum();
        let nx: f64 = x.iter().map(|&p| (p as f64).powi(2)).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|&q| (q as f64).powi(2)).sum::<f64>().sqrt();
        Some(dot / (nx * ny).max(1e-12))
    }
}

#[derive(Debug, Clone)]
pub struct SkipGramOutput {
    pub embeddings: EmbeddingMatrix,
    /// Mean negative-sampling loss per positive pair, one entry per epoch.
    pub epoch_loss: Vec<f64>,
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Skip-gram with negative sampling. Every other code of a sentence is a
/// context of each code; negatives come from the unigram distribution raised
/// to the 0.75 power. Only the corpus is consulted, never survival labels.
pub fn train_skipgram(corpus: &SentenceCorpus, cfg: &SkipGramConfig) -> Result<SkipGramOutput> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(StrafeError::Corpus("empty corpus".into()));
    }
    let vocab = corpus.vocabulary();
    if vocab.len() < 2 {
        return Err(StrafeError::Corpus(format!("vocabulary of size {} is too small", vocab.len())));
    }
    let d = cfg.dim;
    let v = vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut input: Vec<f64> = (0..v * d)
        .map(|_| (rng.random::<f64>() - 0.5) / d as f64)
        .collect();
    let mut output = vec![0.0f64; v * d];

    let noise = WeightedIndex::new((0..v).map(|i| (vocab.count(i) as f64).powf(0.75)))
        .map_err(|e| StrafeError::Corpus(e.to_string()))?;
    let encoded: Vec<Vec<usize>> = corpus
        .sentences
        .iter()
        .map(|s| s.iter().map(|c| vocab.index_of(c).expect("built from corpus")).collect())
        .filter(|s: &Vec<usize>| s.len() >= 2)
        .collect();
    let pairs_per_epoch: usize = encoded.iter().map(|s| s.len() * (s.len() - 1)).sum();
    let total_pairs = (pairs_per_epoch * cfg.epochs).max(1);

    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut seen = 0usize;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut grad_in = vec![0.0f64; d];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &si in &order {
            let sentence = &encoded[si];
            for (a, &center) in sentence.iter().enumerate() {
                for (b, &context) in sentence.iter().enumerate() {
                    if a == b {
                        continue;
                    }
                    let lr = cfg.lr * (1.0 - seen as f64 / total_pairs as f64).max(1e-4);
                    seen += 1;
                    grad_in.iter_mut().for_each(|g| *g = 0.0);
                    let c_off = center * d;
                    for k in 0..=cfg.negatives {
                        let (target, label) = if k == 0 {
                            (context, 1.0)
                        } else {
                            let n = noise.sample(&mut rng);
                            if n == context {
                                continue;
                            }
                            (n, 0.0)
                        };
                        let t_off = target * d;
                        let score: f64 = (0..d).map(|i| input[c_off + i] * output[t_off + i]).sum();
                        loss_sum -= if label == 1.0 { log_sigmoid(score) } else { log_sigmoid(-score) };
                        let g = lr * (label - sigmoid(score));
                        for i in 0..d {
                            grad_in[i] += g * output[t_off + i];
                            output[t_off + i] += g * input[c_off + i];
                        }
                    }
                    for i in 0..d {
                        input[c_off + i] += grad_in[i];
                    }
                }
            }
        }
        epoch_loss.push(loss_sum / pairs_per_epoch.max(1) as f64);
    }
    let data = input.into_iter().map(|x| x as f32).collect();
    Ok(SkipGramOutput {
        embeddings: EmbeddingMatrix::new(vocab, d, data)?,
        epoch_loss,
    })
}

/// Per-code count of visits containing the code, over the whole history.
#[derive(Debug, Clone, PartialEq)]
pub struct BowFeatures {
    pub counts: Vec<u32>,
    /// Incidences of codes missing from the vocabulary.
    pub oov: u32,
}

impl BowFeatures {
    pub fn nonzero(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.counts.iter().copied().enumerate().filter(|(_, c)| *c > 0)
    }

    pub fn l1(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum::<u64>() + self.oov as u64
    }

    pub fn to_dense(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }
}

pub fn bow_featurize(patient: &PatientRecord, vocab: &Vocabulary) -> BowFeatures {
    let mut counts = vec![0u32; vocab.len()];
    let mut oov = 0;
    for v in &patient.visits {
        for c in &v.codes {
            match vocab.index_of(c.as_str()) {
                Some(i) => counts[i] += 1,
                None => oov += 1,
            }
        }
    }
    BowFeatures { counts, oov }
}

/// `Σ_{c ∈ codes} φ(c)`; unknown codes contribute nothing.
pub fn embed_codes<'a>(codes: impl IntoIterator<Item = &'a ConceptCode>, emb: &EmbeddingMatrix) -> Vec<f64> {
    let mut out = vec![0.0; emb.dim];
    for c in codes {
        if let Some(row) = emb.lookup(c.as_str()) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x as f64;
            }
        }
    }
    out
}

/// Sum of the embeddings of every code of every visit.
pub fn sum_embedding_featurize(patient: &PatientRecord, emb: &EmbeddingMatrix) -> Vec<f64> {
    embed_codes(patient.visits.iter().flat_map(|v| v.codes.iter()), emb)
}
