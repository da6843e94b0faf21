//! Fitting an HMM to sampled sequences by Baum-Welch EM, with mini-batch
//! interpolated M-steps and a linearly decaying step size.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::Hmm;
use crate::sampling::{derive_seed, sample_index, stream_rng};
use crate::source::{checked_query, NextTokenSource};

/// Sequences per parallel E-step chunk. Chunk results are reduced in index
/// order, so the totals do not depend on thread scheduling.
const CHUNK: usize = 256;

/// Equal-length token sequences over a vocabulary of size `vocab_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    vocab_size: usize,
    sequences: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn new(vocab_size: usize, sequences: Vec<Vec<usize>>) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Input(format!("vocabulary size must be >= 2, got {vocab_size}")));
        }
        if let Some(first) = sequences.first() {
            let n = first.len();
            if n == 0 {
                return Err(Error::Input("corpus sequences must be nonempty".into()));
            }
            for (i, s) in sequences.iter().enumerate() {
                if s.len() != n {
                    return Err(Error::Input(format!(
                        "sequence {i} has length {}, expected {n}: corpora must be fixed-length",
                        s.len()
                    )));
                }
                if let Some(t) = s.iter().find(|&&t| t >= vocab_size) {
                    return Err(Error::Input(format!("sequence {i} has token {t} >= {vocab_size}")));
                }
            }
        }
        Ok(Self {
            vocab_size,
            sequences,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequence_length(&self) -> usize {
        self.sequences.first().map_or(0, Vec::len)
    }

    pub fn num_tokens(&self) -> usize {
        self.len() * self.sequence_length()
    }

    /// First `count` sequences and the rest.
    pub fn split_at(&self, count: usize) -> (Corpus, Corpus) {
        let count = count.min(self.len());
        let (a, b) = self.sequences.split_at(count);
        let make = |s: &[Vec<usize>]| Corpus {
            vocab_size: self.vocab_size,
            sequences: s.to_vec(),
        };
        (make(a), make(b))
    }

    /// One JSON array of token ids per line; blank lines are skipped.
    pub fn from_jsonl(vocab_size: usize, text: &str) -> Result<Self> {
        let sequences = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<Vec<usize>>, _>>()?;
        Self::new(vocab_size, sequences)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.sequences {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn load(vocab_size: usize, path: &Path) -> Result<Self> {
        Self::from_jsonl(vocab_size, &std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }
}

/// Step size decaying linearly from `start` to `end` over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self { start: 1.0, end: 0.0 }
    }
}

impl StepSchedule {
    pub fn constant(alpha: f64) -> Self {
        Self {
            start: alpha,
            end: alpha,
        }
    }

    /// Step size for update `step` of `total` (0-based). The first update uses
    /// `start`; the sequence approaches `end` and would reach it one update
    /// past the last, so a default schedule never takes a zero step.
    pub fn alpha(&self, step: usize, total: usize) -> f64 {
        if total == 0 {
            return self.start;
        }
        self.start + (self.end - self.start) * step as f64 / total as f64
    }
}

fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    1024
}
fn default_smoothing() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub num_states: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub step_schedule: StepSchedule,
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
    #[serde(default)]
    pub seed: u64,
}

impl EmConfig {
    pub fn new(num_states: usize, seed: u64) -> Self {
        Self {
            num_states,
            epochs: default_epochs(),
            batch_size: default_batch(),
            step_schedule: StepSchedule::default(),
            smoothing: default_smoothing(),
            seed,
        }
    }

    /// Classic Baum-Welch: one full-corpus batch per iteration, step size 1.
    pub fn full_batch(num_states: usize, iterations: usize, seed: u64) -> Self {
        Self {
            num_states,
            epochs: iterations,
            batch_size: usize::MAX,
            step_schedule: StepSchedule::constant(1.0),
            smoothing: default_smoothing(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_states == 0 {
            return Err(Error::Input("num_states must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Input("batch_size must be >= 1".into()));
        }
        if !(self.smoothing >= 0.0 && self.smoothing.is_finite()) {
            return Err(Error::Input(format!("smoothing must be finite and >= 0, got {}", self.smoothing)));
        }
        let s = self.step_schedule;
        let ok = |a: f64| (0.0..=1.0).contains(&a);
        if !(ok(s.start) && ok(s.end)) {
            return Err(Error::Input("step schedule endpoints must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Probability-space parameters, row-major like [`Hmm`].
#[derive(Debug, Clone)]
struct Params {
    h: usize,
    v: usize,
    init: Vec<f64>,
    trans: Vec<f64>,
    emit: Vec<f64>,
}

impl Params {
    fn from_hmm(hmm: &Hmm) -> Self {
        let exp = |xs: &[f64]| xs.iter().map(|x| x.exp()).collect();
        Self {
            h: hmm.num_states(),
            v: hmm.vocab_size(),
            init: exp(hmm.log_initial()),
            trans: exp(hmm.log_transition()),
            emit: exp(hmm.log_emission()),
        }
    }

    fn to_hmm(&self) -> Result<Hmm> {
        let ln = |xs: &[f64]| xs.iter().map(|x| x.ln()).collect();
        Hmm::new(self.h, self.v, ln(&self.init), ln(&self.trans), ln(&self.emit))
    }
}

/// Expected sufficient statistics of a batch.
#[derive(Debug, Clone)]
struct Counts {
    init: Vec<f64>,
    trans: Vec<f64>,
    emit: Vec<f64>,
    log_likelihood: f64,
}

impl Counts {
    fn zeros(h: usize, v: usize) -> Self {
        Self {
            init: vec![0.0; h],
            trans: vec![0.0; h * h],
            emit: vec![0.0; h * v],
            log_likelihood: 0.0,
        }
    }

    fn add(&mut self, other: &Counts) {
        let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.init, &other.init);
        add(&mut self.trans, &other.trans);
        add(&mut self.emit, &other.emit);
        self.log_likelihood += other.log_likelihood;
    }
}

/// Scaled forward-backward for one sequence: adds posterior state,
/// transition and emission counts to `out`, returns `ln p(x)`.
///
/// Per-step normalizers keep the messages in range, so this runs in plain
/// probability space without underflow for any practical length.
fn accumulate(p: &Params, seq: &[usize], out: &mut Counts) -> f64 {
    let (h, v, n) = (p.h, p.v, seq.len());
    let mut alpha = vec![0.0; n * h];
    let mut scale = vec![0.0; n];
    for z in 0..h {
        alpha[z] = p.init[z] * p.emit[z * v + seq[0]];
    }
    for t in 0..n {
        if t > 0 {
            for z in 0..h {
                let mut s = 0.0;
                for y in 0..h {
                    s += alpha[(t - 1) * h + y] * p.trans[y * h + z];
                }
                alpha[t * h + z] = s * p.emit[z * v + seq[t]];
            }
        }
        let c: f64 = alpha[t * h..(t + 1) * h].iter().sum();
        if !(c > 0.0) {
            // Impossible under the current parameters: contributes no counts.
            return f64::NEG_INFINITY;
        }
        alpha[t * h..(t + 1) * h].iter_mut().for_each(|a| *a /= c);
        scale[t] = c;
    }
    let mut beta = vec![1.0; h];
    let mut next = vec![0.0; h];
    for t in (0..n).rev() {
        for z in 0..h {
            let g = alpha[t * h + z] * beta[z];
            out.emit[z * v + seq[t]] += g;
            if t == 0 {
                out.init[z] += g;
            }
        }
        if t == 0 {
            break;
        }
        // e(z, x_t) beta_t(z) / c_t, shared by xi and the next beta.
        let eb: Vec<f64> = (0..h)
            .map(|z| p.emit[z * v + seq[t]] * beta[z] / scale[t])
            .collect();
        for y in 0..h {
            let a = alpha[(t - 1) * h + y];
            let mut s = 0.0;
            for z in 0..h {
                let term = p.trans[y * h + z] * eb[z];
                out.trans[y * h + z] += a * term;
                s += term;
            }
            next[y] = s;
        }
        std::mem::swap(&mut beta, &mut next);
    }
    scale.iter().map(|c| c.ln()).sum()
}

fn expected_counts(p: &Params, seqs: &[&[usize]]) -> Counts {
    let partial: Vec<Counts> = seqs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut c = Counts::zeros(p.h, p.v);
            for s in chunk {
                c.log_likelihood += accumulate(p, s, &mut c);
            }
            c
        })
        .collect();
    let mut total = Counts::zeros(p.h, p.v);
    for c in &partial {
        total.add(c);
    }
    total
}

/// `(counts + delta)` row-normalized, then `(1 - alpha) old + alpha new`.
/// A row with no mass at all (possible only when `delta = 0`) keeps its old
/// value.
fn blend_rows(old: &mut [f64], counts: &[f64], width: usize, delta: f64, alpha: f64) {
    for (row_old, row_cnt) in old.chunks_mut(width).zip(counts.chunks(width)) {
        let total: f64 = row_cnt.iter().map(|c| c + delta).sum();
        if !(total > 0.0) {
            continue;
        }
        for (o, c) in row_old.iter_mut().zip(row_cnt) {
            *o = (1.0 - alpha) * *o + alpha * ((c + delta) / total);
        }
    }
}

fn m_step(p: &mut Params, counts: &Counts, delta: f64, alpha: f64) {
    blend_rows(&mut p.init, &counts.init, p.h, delta, alpha);
    blend_rows(&mut p.trans, &counts.trans, p.h, delta, alpha);
    blend_rows(&mut p.emit, &counts.emit, p.v, delta, alpha);
}

/// Handed to the observer after every epoch.
#[derive(Debug)]
pub struct EpochReport<'a> {
    /// 1-based.
    pub epoch: usize,
    pub hmm: &'a Hmm,
    /// Sum of `ln p(x)` over the epoch's batches, each under the parameters
    /// in force when its E-step ran.
    pub batch_log_likelihood: f64,
    /// Largest absolute change of any probability entry over the epoch.
    pub max_param_change: f64,
}

pub fn em_fit(corpus: &Corpus, cfg: &EmConfig) -> Result<Hmm> {
    em_fit_observed(corpus, cfg, None, |_| {})
}

/// EM from `init` (or a flat-Dirichlet random model seeded from `cfg.seed`),
/// calling `observe` after every epoch.
pub fn em_fit_observed<F>(corpus: &Corpus, cfg: &EmConfig, init: Option<&Hmm>, mut observe: F) -> Result<Hmm>
where
    F: FnMut(&EpochReport<'_>),
{
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("cannot fit an empty corpus".into()));
    }
    let v = corpus.vocab_size();
    let start = match init {
        Some(h) => {
            if h.vocab_size() != v || h.num_states() != cfg.num_states {
                return Err(Error::Config(format!(
                    "initial model is {}x{}, config and corpus need {}x{v}",
                    h.num_states(),
                    h.vocab_size(),
                    cfg.num_states
                )));
            }
            h.clone()
        }
        None => Hmm::random(cfg.num_states, v, &mut stream_rng(derive_seed(cfg.seed, "em-init")))?,
    };
    let mut params = Params::from_hmm(&start);
    let mut hmm = start;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut shuffle_rng = stream_rng(derive_seed(cfg.seed, "em-shuffle"));
    let batch = cfg.batch_size.min(corpus.len());
    let per_epoch = corpus.len().div_ceil(batch);
    let total_steps = per_epoch * cfg.epochs;
    let full_batch = per_epoch == 1;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        if !full_batch {
            order.shuffle(&mut shuffle_rng);
        }
        let before = params.clone();
        let mut epoch_ll = 0.0;
        for idx in order.chunks(batch) {
            let seqs: Vec<&[usize]> = idx.iter().map(|&i| corpus.sequences[i].as_slice()).collect();
            let counts = expected_counts(&params, &seqs);
            epoch_ll += counts.log_likelihood;
            m_step(&mut params, &counts, cfg.smoothing, cfg.step_schedule.alpha(step, total_steps));
            step += 1;
        }
        hmm = params.to_hmm()?;
        let max_param_change = [
            (&before.init, &params.init),
            (&before.trans, &params.trans),
            (&before.emit, &params.emit),
        ]
        .iter()
        .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
        observe(&EpochReport {
            epoch,
            hmm: &hmm,
            batch_log_likelihood: epoch_ll,
            max_param_change,
        });
    }
    Ok(hmm)
}

/// `sum ln p(x)` over the corpus.
pub fn corpus_log_likelihood(hmm: &Hmm, corpus: &Corpus) -> Result<f64> {
    if hmm.vocab_size() != corpus.vocab_size() {
        return Err(Error::Config("model and corpus vocabularies differ".into()));
    }
    let p = Params::from_hmm(hmm);
    let seqs: Vec<&[usize]> = corpus.sequences.iter().map(Vec::as_slice).collect();
    Ok(expected_counts(&p, &seqs).log_likelihood)
}

/// Mean log-likelihood per token.
pub fn per_token_log_likelihood(hmm: &Hmm, corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    Ok(corpus_log_likelihood(hmm, corpus)? / corpus.num_tokens() as f64)
}

/// `count` sequences of `length` tokens, each sampled autoregressively from
/// the source on its own stream (`derive_seed(seed, "corpus") ^ index`).
pub fn corpus_from_source(source: &dyn NextTokenSource, count: usize, length: usize, seed: u64) -> Result<Corpus> {
    if count == 0 || length == 0 {
        return Err(Error::Input("count and length must be >= 1".into()));
    }
    let base = derive_seed(seed, "corpus");
    let sequences = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(base ^ i as u64);
            let mut seq = Vec::with_capacity(length);
            for _ in 0..length {
                let probs = checked_query(source, &seq)?;
                let x = sample_index(&probs, &mut rng)
                    .ok_or_else(|| Error::Input("source returned an all-zero distribution".into()))?;
                seq.push(x);
            }
            Ok(seq)
        })
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(source.vocab_size(), sequences)
}

/// Like [`corpus_from_source`] but by ancestral sampling from an HMM, which
/// avoids per-prefix forward states.
pub fn corpus_from_hmm(hmm: &Hmm, count: usize, length: usize, seed: u64) -> Result<Corpus> {
    if count == 0 || length == 0 {
        return Err(Error::Input("count and length must be >= 1".into()));
    }
    let base = derive_seed(seed, "corpus-hmm");
    let sequences = (0..count)
        .into_par_iter()
        .map(|i| hmm.sample_sequence(length, &mut stream_rng(base ^ i as u64)))
        .collect();
    Corpus::new(hmm.vocab_size(), sequences)
}
