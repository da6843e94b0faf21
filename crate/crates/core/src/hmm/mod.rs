//! Hidden Markov model over integer tokens and the exact inference used for
//! guided decoding.
//!
//! All tables are kept in log space. Rows are indexed by the source state:
//! `log_transition[a * h + b] = log p(z_t = b | z_{t-1} = a)` and
//! `log_emission[z * v + x] = log p(x_t = x | z_t = z)`.

mod cache;
mod forward;
mod io;

pub use cache::BackwardCache;
pub use forward::ForwardState;
pub(crate) use io::{decode_logs, encode_logs};
pub use io::{BINARY_MAGIC, BINARY_VERSION};

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::logspace::log_sum_exp;
use crate::sampling::sample_log_index;

/// Row sums of the probability tables must be within this of one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

pub type Fingerprint = [u8; 32];

#[derive(Debug, Clone)]
pub struct Hmm {
    h: usize,
    v: usize,
    log_initial: Vec<f64>,
    log_transition: Vec<f64>,
    log_emission: Vec<f64>,
    /// `exp(log_emission)`, for the max-shifted linear-space sums in scoring.
    emission: Vec<f64>,
    fingerprint: Fingerprint,
}

impl PartialEq for Hmm {
    fn eq(&self, other: &Self) -> bool {
        self.fingerprint == other.fingerprint
    }
}

impl Hmm {
    /// Builds a model from flat row-major log tables, validating every
    /// invariant (finite-or-`-inf` entries, rows normalized, `h >= 1`, `v >= 2`).
    pub fn new(
        h: usize,
        v: usize,
        log_initial: Vec<f64>,
        log_transition: Vec<f64>,
        log_emission: Vec<f64>,
    ) -> Result<Self> {
        if h == 0 {
            return Err(Error::Input("hidden state count must be >= 1".into()));
        }
        if v < 2 {
            return Err(Error::Input(format!("vocabulary size must be >= 2, got {v}")));
        }
        check_len("log_initial", &log_initial, h)?;
        check_len("log_transition", &log_transition, h * h)?;
        check_len("log_emission", &log_emission, h * v)?;
        check_row("log_initial", &log_initial)?;
        for (z, row) in log_transition.chunks(h).enumerate() {
            check_row(&format!("log_transition row {z}"), row)?;
        }
        for (z, row) in log_emission.chunks(v).enumerate() {
            check_row(&format!("log_emission row {z}"), row)?;
        }
        let fingerprint = fingerprint_tables(h, v, &log_initial, &log_transition, &log_emission);
        let emission = log_emission.iter().map(|e| e.exp()).collect();
        Ok(Self {
            h,
            v,
            log_initial,
            log_transition,
            log_emission,
            emission,
            fingerprint,
        })
    }

    /// Builds a model from probability-space tables.
    pub fn from_probs(
        initial: &[f64],
        transition: &[Vec<f64>],
        emission: &[Vec<f64>],
    ) -> Result<Self> {
        let h = initial.len();
        let v = emission.first().map_or(0, Vec::len);
        if transition.len() != h || emission.len() != h {
            return Err(Error::Input("table row counts must equal the state count".into()));
        }
        let ln = |xs: &[f64]| xs.iter().map(|p| p.ln()).collect::<Vec<_>>();
        Self::new(
            h,
            v,
            ln(initial),
            transition.iter().flat_map(|r| ln(r)).collect(),
            emission.iter().flat_map(|r| ln(r)).collect(),
        )
    }

    /// Random model with every row drawn from a flat Dirichlet.
    pub fn random<R: Rng + ?Sized>(h: usize, v: usize, rng: &mut R) -> Result<Self> {
        let initial = dirichlet_row(h, rng);
        let transition = (0..h).flat_map(|_| dirichlet_row(h, rng)).collect();
        let emission = (0..h).flat_map(|_| dirichlet_row(v, rng)).collect();
        Self::new(h, v, initial, transition, emission)
    }

    pub fn num_states(&self) -> usize {
        self.h
    }

    pub fn vocab_size(&self) -> usize {
        self.v
    }

    pub fn log_initial(&self) -> &[f64] {
        &self.log_initial
    }

    /// Flat `h x h` log transition table, row = previous state.
    pub fn log_transition(&self) -> &[f64] {
        &self.log_transition
    }

    /// Flat `h x v` log emission table, row = state.
    pub fn log_emission(&self) -> &[f64] {
        &self.log_emission
    }

    pub fn log_transition_row(&self, from: usize) -> &[f64] {
        &self.log_transition[from * self.h..(from + 1) * self.h]
    }

    pub fn log_emission_row(&self, state: usize) -> &[f64] {
        &self.log_emission[state * self.v..(state + 1) * self.v]
    }

    pub(crate) fn emission_row(&self, state: usize) -> &[f64] {
        &self.emission[state * self.v..(state + 1) * self.v]
    }

    #[inline]
    pub(crate) fn log_emit(&self, state: usize, token: usize) -> f64 {
        self.log_emission[state * self.v + token]
    }

    /// Content hash of all parameters.
    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    pub(crate) fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.v {
            return Err(Error::Input(format!(
                "token id {token} out of range for vocabulary of size {}",
                self.v
            )));
        }
        Ok(())
    }

    /// `log p(x_1..x_n)` by the forward recursion. `-inf` when some token
    /// cannot be emitted.
    pub fn log_likelihood(&self, tokens: &[usize]) -> Result<f64> {
        let (first, rest) = tokens
            .split_first()
            .ok_or_else(|| Error::Input("cannot score an empty sequence".into()))?;
        let mut state = self.forward_init(*first)?;
        for &tok in rest {
            state = self.forward_update(&state, tok)?;
        }
        Ok(state.log_evidence())
    }

    /// Ancestral sample `z1 -> x1 -> z2 -> ...` of exactly `length` tokens.
    pub fn sample_sequence<R: Rng + ?Sized>(&self, length: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(length);
        let mut z = sample_log_index(&self.log_initial, rng).expect("initial row is normalized");
        for i in 0..length {
            if i > 0 {
                z = sample_log_index(self.log_transition_row(z), rng)
                    .expect("transition row is normalized");
            }
            let x = sample_log_index(self.log_emission_row(z), rng)
                .expect("emission row is normalized");
            out.push(x);
        }
        out
    }
}

fn check_len(name: &str, xs: &[f64], want: usize) -> Result<()> {
    if xs.len() != want {
        return Err(Error::Input(format!(
            "{name} has {} entries, expected {want}",
            xs.len()
        )));
    }
    Ok(())
}

fn check_row(name: &str, row: &[f64]) -> Result<()> {
    if let Some(bad) = row.iter().find(|x| x.is_nan() || *x == &f64::INFINITY) {
        return Err(Error::Input(format!("{name} contains invalid entry {bad}")));
    }
    let total = log_sum_exp(row).exp();
    if (total - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::Input(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

fn dirichlet_row<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = (0..len)
        .map(|_| {
            let g: f64 = Exp1.sample(rng);
            g.max(f64::MIN_POSITIVE)
        })
        .collect();
    let total: f64 = draws.iter().sum();
    draws.iter().map(|g| (g / total).ln()).collect()
}

fn fingerprint_tables(h: usize, v: usize, a: &[f64], b: &[f64], c: &[f64]) -> Fingerprint {
    let mut hasher = Sha256::new();
    hasher.update(b"hmm");
    hasher.update((h as u64).to_le_bytes());
    hasher.update((v as u64).to_le_bytes());
    for x in a.iter().chain(b).chain(c) {
        hasher.update(x.to_bits().to_le_bytes());
    }
    hasher.finalize().into()
}
