//! Evaluation metrics for generated samples and the decode-scale sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{FactorizedClassifier, LogitTransform};
use crate::decoder::{GenerationConfig, Generator, Sample};
use crate::error::{Error, Result};
use crate::logspace::sigmoid;
use crate::source::{checked_query, NextTokenSource};

/// Mean over sequences of `distinct n-grams / total n-grams`. Sequences
/// shorter than `n` are skipped; 0 if none qualifies.
pub fn distinct_n(sequences: &[Vec<usize>], n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be >= 1");
    let ratios: Vec<f64> = sequences
        .iter()
        .filter(|s| s.len() >= n)
        .map(|s| {
            let mut grams: Vec<&[usize]> = s.windows(n).collect();
            let total = grams.len();
            grams.sort_unstable();
            grams.dedup();
            grams.len() as f64 / total as f64
        })
        .collect();
    if ratios.is_empty() {
        return 0.0;
    }
    ratios.iter().sum::<f64>() / ratios.len() as f64
}

/// Maps a token sequence to an attribute-violation score in `[0, 1]`.
pub trait AttributeScorer: Send + Sync {
    fn score(&self, tokens: &[usize]) -> f64;
}

/// `1 - prod_i w(x_i)`: the probability that a factorized classifier calls
/// the sequence a violation.
pub struct ClassifierViolation(pub FactorizedClassifier);

impl AttributeScorer for ClassifierViolation {
    fn score(&self, tokens: &[usize]) -> f64 {
        let lp: f64 = tokens.iter().map(|&t| self.0.log_weights()[t]).sum();
        -lp.exp_m1()
    }
}

/// `sigmoid(scale * (#bad tokens) - offset)`: not a product over tokens, so
/// no factorized classifier reproduces it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountScorer {
    pub bad: Vec<usize>,
    pub scale: f64,
    pub offset: f64,
}

impl AttributeScorer for CountScorer {
    fn score(&self, tokens: &[usize]) -> f64 {
        let count = tokens.iter().filter(|t| self.bad.contains(t)).count();
        sigmoid(self.scale * count as f64 - self.offset)
    }
}

/// Per-prompt groups of `k` sequences with their attribute scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    groups: Vec<Vec<(Vec<usize>, f64)>>,
}

impl SampleSet {
    pub fn new(groups: Vec<Vec<(Vec<usize>, f64)>>) -> Result<Self> {
        let k = groups.first().map_or(0, Vec::len);
        if k == 0 {
            return Err(Error::Input("sample set needs at least one nonempty group".into()));
        }
        for (i, g) in groups.iter().enumerate() {
            if g.len() != k {
                return Err(Error::Input(format!("group {i} has {} samples, expected {k}", g.len())));
            }
            if let Some((_, s)) = g.iter().find(|(_, s)| !(s.is_finite() && (0.0..=1.0).contains(s))) {
                return Err(Error::Input(format!("score {s} in group {i} outside [0, 1]")));
            }
        }
        Ok(Self { groups })
    }

    /// Scores every sample's continuation.
    pub fn score(groups: &[Vec<Sample>], scorer: &dyn AttributeScorer) -> Result<Self> {
        Self::new(
            groups
                .iter()
                .map(|g| g.iter().map(|s| (s.tokens.clone(), scorer.score(&s.tokens))).collect())
                .collect(),
        )
    }

    pub fn groups(&self) -> &[Vec<(Vec<usize>, f64)>] {
        &self.groups
    }

    pub fn sequences(&self) -> Vec<Vec<usize>> {
        self.groups.iter().flatten().map(|(s, _)| s.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeMetrics {
    /// Mean over groups of the largest score in the group.
    pub avg_max: f64,
    /// Fraction of groups with at least one score above the threshold.
    pub any_exceeds_prob: f64,
}

pub fn attribute_metrics(set: &SampleSet, threshold: f64) -> AttributeMetrics {
    let g = set.groups.len() as f64;
    let maxima: Vec<f64> = set
        .groups
        .iter()
        .map(|grp| grp.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    AttributeMetrics {
        avg_max: maxima.iter().sum::<f64>() / g,
        any_exceeds_prob: maxima.iter().filter(|&&m| m > threshold).count() as f64 / g,
    }
}

/// `sum_t ln p(x_t | context, x_<t)` over `tokens`.
fn continuation_logprob(source: &dyn NextTokenSource, context: &[usize], tokens: &[usize]) -> Result<f64> {
    let mut prefix = context.to_vec();
    let mut total = 0.0;
    for &x in tokens {
        let probs = checked_query(source, &prefix)?;
        let p = *probs
            .get(x)
            .ok_or_else(|| Error::Input(format!("token {x} outside source vocabulary")))?;
        total += p.ln();
        prefix.push(x);
    }
    Ok(total)
}

/// `exp(-mean per-token log-prob)` over sequences scored from the empty
/// prefix.
pub fn perplexity(source: &dyn NextTokenSource, sequences: &[Vec<usize>]) -> Result<f64> {
    let items: Vec<(&[usize], &[usize])> = sequences.iter().map(|s| (&[][..], s.as_slice())).collect();
    perplexity_in_context(source, &items)
}

/// Perplexity of continuations, each conditioned on its prompt. Tokens are
/// pooled across all items.
pub fn perplexity_in_context(source: &dyn NextTokenSource, items: &[(&[usize], &[usize])]) -> Result<f64> {
    let tokens: usize = items.iter().map(|(_, c)| c.len()).sum();
    if tokens == 0 {
        return Err(Error::Input("perplexity needs at least one token".into()));
    }
    let parts = items
        .par_iter()
        .map(|(ctx, cont)| continuation_logprob(source, ctx, cont))
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = parts.iter().sum();
    Ok((-total / tokens as f64).exp())
}

/// Perplexity of the generated continuations given their prompts.
pub fn sample_perplexity(source: &dyn NextTokenSource, groups: &[Vec<Sample>]) -> Result<f64> {
    let items: Vec<(&[usize], &[usize])> = groups
        .iter()
        .flatten()
        .map(|s| (s.prompt.as_slice(), s.tokens.as_slice()))
        .collect();
    perplexity_in_context(source, &items)
}

/// Mean of `-ln q(x_t)` over every generated step, `q` being the
/// distribution each token was actually drawn from.
pub fn conditional_entropy(groups: &[Vec<Sample>]) -> f64 {
    let (sum, count) = groups
        .iter()
        .flatten()
        .flat_map(|s| s.step_logq.iter())
        .fold((0.0, 0usize), |(s, c), lq| (s - lq, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Metrics of one sample batch, as written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub avg_max: f64,
    pub any_prob: f64,
    pub dist2: f64,
    pub dist3: f64,
    pub ppl: f64,
    /// Only known when the samples come straight from the decoder.
    pub entropy: Option<f64>,
    pub prompts: usize,
    pub samples_per_prompt: usize,
}

pub fn evaluate(
    groups: &[Vec<Sample>],
    scorer: &dyn AttributeScorer,
    ppl_source: &dyn NextTokenSource,
    threshold: f64,
) -> Result<EvalReport> {
    let set = SampleSet::score(groups, scorer)?;
    let attr = attribute_metrics(&set, threshold);
    let seqs = set.sequences();
    let has_steps = groups.iter().flatten().any(|s| !s.step_logq.is_empty());
    Ok(EvalReport {
        avg_max: attr.avg_max,
        any_prob: attr.any_exceeds_prob,
        dist2: distinct_n(&seqs, 2),
        dist3: distinct_n(&seqs, 3),
        ppl: sample_perplexity(ppl_source, groups)?,
        entropy: has_steps.then(|| conditional_entropy(groups)),
        prompts: groups.len(),
        samples_per_prompt: groups.first().map_or(0, Vec::len),
    })
}

/// One sweep point. Metrics are NaN when decoding hit a contradiction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub b: f64,
    pub avg_max: f64,
    pub any_prob: f64,
    pub dist2: f64,
    pub dist3: f64,
    pub ppl: f64,
    pub entropy: f64,
    pub contradiction: Option<usize>,
}

pub const SWEEP_HEADER: &str = "b,avg_max,any_prob,dist2,dist3,ppl,entropy";

/// Generates and evaluates one sample set per decode scale `b` (shift fixed
/// at `shift`). Every point reuses `base.seed`, so rows differ only through
/// `b`.
pub fn sweep(
    gen: &Generator<'_>,
    prompts: &[Vec<usize>],
    base: &GenerationConfig,
    b_values: &[f64],
    shift: f64,
    scorer: &dyn AttributeScorer,
    ppl_source: &dyn NextTokenSource,
) -> Result<Vec<SweepRow>> {
    if b_values.is_empty() {
        return Err(Error::Input("sweep needs at least one b value".into()));
    }
    let mut rows = Vec::with_capacity(b_values.len());
    for &b in b_values {
        let cfg = GenerationConfig {
            decode_transform: Some(LogitTransform::new(b, shift)?),
            ..base.clone()
        };
        match gen.generate_batch(prompts, &cfg) {
            Ok(groups) => {
                let r = evaluate(&groups, scorer, ppl_source, 0.5)?;
                rows.push(SweepRow {
                    b,
                    avg_max: r.avg_max,
                    any_prob: r.any_prob,
                    dist2: r.dist2,
                    dist3: r.dist3,
                    ppl: r.ppl,
                    entropy: r.entropy.unwrap_or(f64::NAN),
                    contradiction: None,
                });
            }
            Err(Error::Contradiction { step }) => rows.push(SweepRow {
                b,
                avg_max: f64::NAN,
                any_prob: f64::NAN,
                dist2: f64::NAN,
                dist3: f64::NAN,
                ppl: f64::NAN,
                entropy: f64::NAN,
                contradiction: Some(step),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(rows)
}

/// `%.6g`-style formatting: 6 significant digits, trailing zeros trimmed,
/// exponent form outside `[1e-4, 1e6)`.
pub fn format_g6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-4..6).contains(&exp) {
        trim(format!("{x:.*}", (5 - exp) as usize))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa.to_string()), exp.abs())
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let cells = [r.b, r.avg_max, r.any_prob, r.dist2, r.dist3, r.ppl, r.entropy];
        out.push_str(&cells.map(format_g6).join(","));
        out.push('\n');
    }
    out
}
