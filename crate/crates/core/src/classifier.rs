//! Factorized attribute classifiers `p(s | x_1..n) = prod_i w(x_i)`.
//!
//! Weights live in log space, clamped to `[floor, 0]`. They are fitted by
//! least squares between `sum_i log w(x_i)` and the log of (optionally
//! transformed) oracle probabilities.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hmm::Fingerprint;
use crate::logspace::{log_sigmoid, logit, sigmoid};

/// Default lower bound on log-weights (`w >= ~2e-9`).
pub const DEFAULT_LOG_WEIGHT_FLOOR: f64 = -20.0;

/// Probabilities are clamped into `[EPS, 1 - EPS]` before any log or logit.
pub const PROB_CLAMP_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct FactorizedClassifier {
    log_weight: Vec<f64>,
    floor: f64,
    fingerprint: Fingerprint,
}

impl PartialEq for FactorizedClassifier {
    fn eq(&self, other: &Self) -> bool {
        self.floor == other.floor
            && self.log_weight.len() == other.log_weight.len()
            && self
                .log_weight
                .iter()
                .zip(&other.log_weight)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn fingerprint_weights(log_weight: &[f64]) -> Fingerprint {
    let mut hasher = Sha256::new();
    hasher.update(b"factorized-classifier");
    hasher.update((log_weight.len() as u64).to_le_bytes());
    for w in log_weight {
        hasher.update(w.to_bits().to_le_bytes());
    }
    hasher.finalize().into()
}

impl FactorizedClassifier {
    /// Validates that every log-weight lies in `[DEFAULT_LOG_WEIGHT_FLOOR, 0]`.
    pub fn new(log_weight: Vec<f64>) -> Result<Self> {
        Self::with_floor(log_weight, DEFAULT_LOG_WEIGHT_FLOOR)
    }

    pub fn with_floor(log_weight: Vec<f64>, floor: f64) -> Result<Self> {
        Self::build(log_weight, floor, false)
    }

    /// Like [`FactorizedClassifier::new`] but also admits `-inf` (an exact
    /// zero weight). Fitting never produces these.
    pub fn from_log_weights_allow_zero(log_weight: Vec<f64>) -> Result<Self> {
        Self::build(log_weight, DEFAULT_LOG_WEIGHT_FLOOR, true)
    }

    fn build(log_weight: Vec<f64>, floor: f64, allow_zero: bool) -> Result<Self> {
        if !(floor.is_finite() && floor <= 0.0) {
            return Err(Error::Input(format!("log-weight floor must be finite and <= 0, got {floor}")));
        }
        if log_weight.len() < 2 {
            return Err(Error::Input("classifier vocabulary must have >= 2 tokens".into()));
        }
        for (v, &lw) in log_weight.iter().enumerate() {
            let ok = (floor..=0.0).contains(&lw) || (allow_zero && lw == f64::NEG_INFINITY);
            if !ok {
                return Err(Error::Input(format!(
                    "log-weight {lw} for token {v} outside [{floor}, 0]"
                )));
            }
        }
        let fingerprint = fingerprint_weights(&log_weight);
        Ok(Self {
            log_weight,
            floor,
            fingerprint,
        })
    }

    /// All weights one: the classifier that accepts everything.
    pub fn neutral(vocab_size: usize) -> Self {
        Self::new(vec![0.0; vocab_size]).expect("zero log-weights are valid")
    }

    pub fn is_neutral(&self) -> bool {
        self.log_weight.iter().all(|&w| w == 0.0)
    }

    pub fn vocab_size(&self) -> usize {
        self.log_weight.len()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weight
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    /// `sum_i log w(x_i)`.
    pub fn score_log(&self, tokens: &[usize]) -> Result<f64> {
        tokens.iter().try_fold(0.0, |acc, &t| {
            self.log_weight
                .get(t)
                .map(|w| acc + w)
                .ok_or_else(|| Error::Input(format!("token id {t} out of range")))
        })
    }

    /// Conjunction of two attributes: weights multiply, then re-floor.
    /// An exact zero weight on either side stays zero.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        if self.vocab_size() != other.vocab_size() {
            return Err(Error::Config(format!(
                "cannot compose classifiers over {} and {} tokens",
                self.vocab_size(),
                other.vocab_size()
            )));
        }
        let floor = self.floor.max(other.floor);
        let log_weight = self
            .log_weight
            .iter()
            .zip(&other.log_weight)
            .map(|(a, b)| {
                let sum = a + b;
                if sum == f64::NEG_INFINITY {
                    sum
                } else {
                    sum.max(floor)
                }
            })
            .collect();
        Self::build(log_weight, floor, true)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ClassifierFile {
            v: self.vocab_size(),
            floor: self.floor,
            log_weight: crate::hmm::encode_logs(&self.log_weight),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ClassifierFile = serde_json::from_str(text)?;
        if file.log_weight.len() != file.v {
            return Err(Error::Input(format!(
                "classifier file declares v={} but has {} weights",
                file.v,
                file.log_weight.len()
            )));
        }
        Self::build(crate::hmm::decode_logs(&file.log_weight), file.floor, true)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    v: usize,
    floor: f64,
    log_weight: Vec<Option<f64>>,
}

/// Affine map in logit space: `p -> sigmoid(scale * logit(p) + shift)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitTransform {
    scale: f64,
    shift: f64,
}

impl LogitTransform {
    pub fn new(scale: f64, shift: f64) -> Result<Self> {
        if !(scale.is_finite() && shift.is_finite() && scale >= 0.0) {
            return Err(Error::Input(format!(
                "logit transform needs finite scale >= 0 and finite shift, got ({scale}, {shift})"
            )));
        }
        Ok(Self { scale, shift })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            shift: 0.0,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    fn pre_activation(&self, p: f64) -> f64 {
        self.scale * logit(clamp_prob(p)) + self.shift
    }

    pub fn apply(&self, p: f64) -> f64 {
        sigmoid(self.pre_activation(p))
    }

    /// `ln(apply(p))`, accurate even when the result underflows.
    pub fn log_apply(&self, p: f64) -> f64 {
        log_sigmoid(self.pre_activation(p))
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP_EPS, 1.0 - PROB_CLAMP_EPS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub tokens: Vec<usize>,
    pub oracle_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub vocab_size: usize,
    pub floor: f64,
    /// Stop once the projected-gradient norm drops below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Sufficient-decrease constant of the Armijo test.
    pub armijo: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            floor: DEFAULT_LOG_WEIGHT_FLOOR,
            tolerance: 1e-8,
            max_iterations: 10_000,
            armijo: 1e-4,
        }
    }
}

impl FitConfig {
    pub fn for_vocab(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub classifier: FactorizedClassifier,
    /// Final value of the summed squared log error.
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Loss after every accepted step, starting with the initial point.
    pub loss_history: Vec<f64>,
}

/// Sparse token-count row of the least-squares design matrix.
struct Row {
    counts: Vec<(usize, f64)>,
    target: f64,
}

fn objective(rows: &[Row], theta: &[f64]) -> f64 {
    rows.iter()
        .map(|r| {
            let pred: f64 = r.counts.iter().map(|&(v, c)| c * theta[v]).sum();
            let res = r.target - pred;
            res * res
        })
        .sum()
}

/// `f(new) - f(old)` computed as `sum_e d_e (d_e - 2 r_e)` with `d_e` the
/// change in prediction, avoiding cancellation between two large losses.
fn loss_change(rows: &[Row], old: &[f64], new: &[f64]) -> f64 {
    rows.iter()
        .map(|r| {
            let (pred, delta) = r.counts.iter().fold((0.0, 0.0), |(p, d), &(v, c)| {
                (p + c * old[v], d + c * (new[v] - old[v]))
            });
            let res = r.target - pred;
            delta * (delta - 2.0 * res)
        })
        .sum()
}

fn gradient(rows: &[Row], theta: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|g| *g = 0.0);
    for r in rows {
        let pred: f64 = r.counts.iter().map(|&(v, c)| c * theta[v]).sum();
        let res = r.target - pred;
        for &(v, c) in &r.counts {
            out[v] -= 2.0 * c * res;
        }
    }
}

/// Log of the fitting target for one oracle score.
pub fn fit_target(oracle_prob: f64, transform: Option<&LogitTransform>) -> f64 {
    match transform {
        Some(tf) => tf.log_apply(oracle_prob),
        None => clamp_prob(oracle_prob).ln(),
    }
}

/// Fits log-weights by projected gradient descent with Armijo backtracking
/// (unit trial step, halving) on the box `[floor, 0]`.
///
/// The objective is convex, so the result is its global minimum up to the
/// stopping tolerance. Tokens that never occur keep log-weight 0.
pub fn fit(
    examples: &[TrainingExample],
    transform: Option<&LogitTransform>,
    config: &FitConfig,
) -> Result<FitOutcome> {
    if examples.is_empty() {
        return Err(Error::Input("cannot fit a classifier on zero examples".into()));
    }
    let v = config.vocab_size;
    if v < 2 {
        return Err(Error::Input("fit needs vocab_size >= 2".into()));
    }
    let mut rows = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        if ex.tokens.is_empty() {
            return Err(Error::Input(format!("example {i} has no tokens")));
        }
        if !ex.oracle_prob.is_finite() {
            return Err(Error::Input(format!("example {i} has non-finite oracle score")));
        }
        let mut counts = vec![0.0; v];
        for &t in &ex.tokens {
            *counts
                .get_mut(t)
                .ok_or_else(|| Error::Input(format!("example {i}: token id {t} out of range")))? += 1.0;
        }
        rows.push(Row {
            counts: counts
                .into_iter()
                .enumerate()
                .filter(|&(_, c)| c > 0.0)
                .collect(),
            target: fit_target(ex.oracle_prob, transform),
        });
    }

    let project = |x: f64| x.clamp(config.floor, 0.0);
    let mut theta = vec![0.0; v];
    let mut grad = vec![0.0; v];
    let mut candidate = vec![0.0; v];
    let mut loss = objective(&rows, &theta);
    let mut history = vec![loss];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < config.max_iterations {
        gradient(&rows, &theta, &mut grad);
        let pg_norm = theta
            .iter()
            .zip(&grad)
            .map(|(t, g)| {
                let d = t - project(t - g);
                d * d
            })
            .sum::<f64>()
            .sqrt();
        if pg_norm < config.tolerance {
            converged = true;
            break;
        }
        let mut step = 1.0;
        let accepted = loop {
            for ((c, t), g) in candidate.iter_mut().zip(&theta).zip(&grad) {
                *c = project(t - step * g);
            }
            if candidate == theta {
                break None;
            }
            let predicted: f64 = candidate
                .iter()
                .zip(&theta)
                .zip(&grad)
                .map(|((c, t), g)| g * (c - t))
                .sum();
            // Near the optimum the loss itself cannot resolve the decrease,
            // so the change is evaluated directly from residual updates.
            let change = loss_change(&rows, &theta, &candidate);
            if change <= config.armijo * predicted {
                break Some(change);
            }
            step *= 0.5;
        };
        iterations += 1;
        match accepted {
            Some(change) => {
                std::mem::swap(&mut theta, &mut candidate);
                loss += change;
                history.push(loss);
            }
            // No representable step moves the iterate: optimal to machine
            // precision.
            None => {
                converged = true;
                break;
            }
        }
    }
    let loss = objective(&rows, &theta);

    Ok(FitOutcome {
        classifier: FactorizedClassifier::with_floor(theta, config.floor)?,
        loss,
        iterations,
        converged,
        loss_history: history,
    })
}

/// Summed squared log error of a classifier on a dataset.
pub fn fit_loss(
    classifier: &FactorizedClassifier,
    examples: &[TrainingExample],
    transform: Option<&LogitTransform>,
) -> Result<f64> {
    examples.iter().try_fold(0.0, |acc, ex| {
        let res = fit_target(ex.oracle_prob, transform) - classifier.score_log(&ex.tokens)?;
        Ok(acc + res * res)
    })
}
