//! Brute-force reference computations by exhaustive enumeration.
//!
//! These work in plain probability space with ordinary sums (no logs, no
//! backward cache) and are only meant for small instances. They are the
//! ground truth that the dynamic-programming code is checked against.

use rand::seq::SliceRandom;

use crate::classifier::FactorizedClassifier;
use crate::error::{Error, Result};
use crate::hmm::Hmm;
use crate::sampling::stream_rng;
use crate::source::{checked_query, NextTokenSource};

/// Cap on the number of enumerated terms: hidden paths for
/// [`bf_sequence_prob`], continuations for [`bf_eap`] and [`bf_conditional`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnumerationBudget {
    pub max_terms: u128,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        Self {
            max_terms: 1_000_000,
        }
    }
}

impl EnumerationBudget {
    pub fn new(max_terms: u128) -> Result<Self> {
        if max_terms == 0 {
            return Err(Error::Input("enumeration budget must be positive".into()));
        }
        Ok(Self { max_terms })
    }

    fn check(&self, needed: u128) -> Result<()> {
        if needed > self.max_terms {
            return Err(Error::Budget {
                needed,
                budget: self.max_terms,
            });
        }
        Ok(())
    }
}

/// Order in which enumerated terms are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SumOrder {
    #[default]
    Lexicographic,
    /// Terms are shuffled with the given seed before summation.
    Shuffled(u64),
}

fn sum_terms(mut terms: Vec<f64>, order: SumOrder) -> f64 {
    if let SumOrder::Shuffled(seed) = order {
        terms.shuffle(&mut stream_rng(seed));
    }
    terms.iter().sum()
}

fn pow(base: usize, exp: usize) -> u128 {
    (base as u128).saturating_pow(exp as u32)
}

fn prob_tables(hmm: &Hmm) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let exp = |xs: &[f64]| xs.iter().map(|x| x.exp()).collect::<Vec<_>>();
    (exp(hmm.log_initial()), exp(hmm.log_transition()), exp(hmm.log_emission()))
}

fn check_tokens(v: usize, tokens: &[usize]) -> Result<()> {
    match tokens.iter().find(|&&t| t >= v) {
        Some(t) => Err(Error::Input(format!("token id {t} out of range"))),
        None => Ok(()),
    }
}

/// `p(x_1..n)` as the literal sum over all `h^n` hidden paths of the product
/// of initial, transition and emission terms.
pub fn bf_sequence_prob(hmm: &Hmm, tokens: &[usize], budget: EnumerationBudget) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::Input("cannot score an empty sequence".into()));
    }
    check_tokens(hmm.vocab_size(), tokens)?;
    let (h, v, n) = (hmm.num_states(), hmm.vocab_size(), tokens.len());
    budget.check(pow(h, n))?;
    let (init, trans, emit) = prob_tables(hmm);
    let mut path = vec![0usize; n];
    let mut total = 0.0;
    loop {
        let mut p = init[path[0]] * emit[path[0] * v + tokens[0]];
        for i in 1..n {
            p *= trans[path[i - 1] * h + path[i]] * emit[path[i] * v + tokens[i]];
        }
        total += p;
        // odometer increment over paths
        let mut i = 0;
        loop {
            if i == n {
                return Ok(total);
            }
            path[i] += 1;
            if path[i] < h {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Probability-space forward vector `alpha[z] = p(z_t = z, x_<=t)`.
struct PlainForward<'a> {
    h: usize,
    v: usize,
    init: &'a [f64],
    trans: &'a [f64],
    emit: &'a [f64],
}

impl PlainForward<'_> {
    fn step(&self, alpha: Option<&[f64]>, token: usize) -> Vec<f64> {
        (0..self.h)
            .map(|z| {
                let prior = match alpha {
                    None => self.init[z],
                    Some(a) => (0..self.h).map(|y| a[y] * self.trans[y * self.h + z]).sum(),
                };
                prior * self.emit[z * self.v + token]
            })
            .collect()
    }
}

/// Collects `p(x_<=n) * prod_{i in tail} w(x_i)` for every continuation of
/// the current forward vector, in lexicographic order.
fn collect_leaves(
    fwd: &PlainForward<'_>,
    alpha: &[f64],
    weight: f64,
    depth_left: usize,
    w: &[f64],
    out: &mut Vec<(f64, f64)>,
) {
    if depth_left == 0 {
        let p: f64 = alpha.iter().sum();
        out.push((p, p * weight));
        return;
    }
    for x in 0..fwd.v {
        let next = fwd.step(Some(alpha), x);
        collect_leaves(fwd, &next, weight * w[x], depth_left - 1, w, out);
    }
}

/// Exact relative expected attribute probability at step `t` (1-based) for
/// every candidate token `v`:
/// `sum_{x_>t} p(x_>t | x_<t, v) * w(v) * prod_{i>t} w(x_i)`.
///
/// `prefix` holds `x_<t` (length `t - 1`); `horizon` is the sequence length.
pub fn bf_eap(
    hmm: &Hmm,
    cls: &FactorizedClassifier,
    prefix: &[usize],
    t: usize,
    horizon: usize,
    budget: EnumerationBudget,
) -> Result<Vec<f64>> {
    bf_eap_ordered(hmm, cls, prefix, t, horizon, budget, SumOrder::Lexicographic)
}

pub fn bf_eap_ordered(
    hmm: &Hmm,
    cls: &FactorizedClassifier,
    prefix: &[usize],
    t: usize,
    horizon: usize,
    budget: EnumerationBudget,
    order: SumOrder,
) -> Result<Vec<f64>> {
    check_step(prefix, t, horizon)?;
    if cls.vocab_size() != hmm.vocab_size() {
        return Err(Error::Config("classifier and model vocabularies differ".into()));
    }
    check_tokens(hmm.vocab_size(), prefix)?;
    let (h, v) = (hmm.num_states(), hmm.vocab_size());
    let remaining = horizon - t + 1;
    // Counted in continuations `x_>t`; each costs O(h^2) on top.
    budget.check(pow(v, remaining - 1))?;
    let (init, trans, emit) = prob_tables(hmm);
    let fwd = PlainForward {
        h,
        v,
        init: &init,
        trans: &trans,
        emit: &emit,
    };
    let w: Vec<f64> = cls.log_weights().iter().map(|l| l.exp()).collect();
    let mut alpha: Option<Vec<f64>> = None;
    for &x in prefix {
        alpha = Some(fwd.step(alpha.as_deref(), x));
    }
    let mut out = Vec::with_capacity(v);
    for cand in 0..v {
        let start = fwd.step(alpha.as_deref(), cand);
        let mut leaves = Vec::new();
        collect_leaves(&fwd, &start, w[cand], remaining - 1, &w, &mut leaves);
        let den = sum_terms(leaves.iter().map(|l| l.0).collect(), order);
        let num = sum_terms(leaves.iter().map(|l| l.1).collect(), order);
        out.push(if den > 0.0 { num / den } else { 0.0 });
    }
    Ok(out)
}

fn check_step(prefix: &[usize], t: usize, horizon: usize) -> Result<()> {
    if t == 0 || t > horizon {
        return Err(Error::Input(format!("step {t} outside 1..={horizon}")));
    }
    if prefix.len() + 1 != t {
        return Err(Error::Input(format!(
            "prefix of length {} does not precede step {t}",
            prefix.len()
        )));
    }
    Ok(())
}

/// Exact `p(x_t = v | x_<t, s)` for an arbitrary source by enumerating all
/// continuations through `horizon`:
/// `∝ sum_{x_>t} p(x_>=t | x_<t) prod_{i>=t} w(x_i)`.
///
/// Weights of `x_<t` are common to every candidate and cancel. Returns the
/// all-zero vector when every continuation has zero weight.
pub fn bf_conditional(
    source: &dyn NextTokenSource,
    cls: &FactorizedClassifier,
    prefix: &[usize],
    t: usize,
    horizon: usize,
    budget: EnumerationBudget,
) -> Result<Vec<f64>> {
    check_step(prefix, t, horizon)?;
    let v = source.vocab_size();
    if cls.vocab_size() != v {
        return Err(Error::Config("classifier and source vocabularies differ".into()));
    }
    let remaining = horizon - t + 1;
    budget.check(pow(v, remaining))?;
    let w: Vec<f64> = cls.log_weights().iter().map(|l| l.exp()).collect();

    fn expected_weight(
        source: &dyn NextTokenSource,
        w: &[f64],
        seq: &mut Vec<usize>,
        depth_left: usize,
    ) -> Result<f64> {
        if depth_left == 0 {
            return Ok(1.0);
        }
        let probs = checked_query(source, seq)?;
        let mut total = 0.0;
        for (x, &p) in probs.iter().enumerate() {
            if p == 0.0 || w[x] == 0.0 {
                continue;
            }
            seq.push(x);
            total += p * w[x] * expected_weight(source, w, seq, depth_left - 1)?;
            seq.pop();
        }
        Ok(total)
    }

    let first = checked_query(source, prefix)?;
    let mut seq = prefix.to_vec();
    let mut scores = Vec::with_capacity(v);
    for cand in 0..v {
        if first[cand] == 0.0 || w[cand] == 0.0 {
            scores.push(0.0);
            continue;
        }
        seq.push(cand);
        let tail = expected_weight(source, &w, &mut seq, remaining - 1)?;
        seq.pop();
        scores.push(first[cand] * w[cand] * tail);
    }
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        scores.iter_mut().for_each(|s| *s /= total);
    }
    Ok(scores)
}
