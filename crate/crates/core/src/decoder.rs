//! Guided decoding: the base next-token distribution reweighted by the exact
//! expected attribute probability of each candidate, then nucleus-filtered
//! and sampled.

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{FactorizedClassifier, LogitTransform};
use crate::error::{Error, Result};
use crate::hmm::{BackwardCache, ForwardState, Hmm};
use crate::logspace::normalize_in_place;
use crate::sampling::{sample_index, stream_rng, StreamRng};
use crate::source::{checked_query, NextTokenSource};

/// Where the nucleus filter sits relative to the EAP reweighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NucleusStage {
    /// Filter the base distribution, then reweight.
    Pre,
    /// Reweight, then filter the combined distribution.
    #[default]
    Post,
}

impl FromStr for NucleusStage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(Self::Pre),
            "post" => Ok(Self::Post),
            other => Err(Error::Input(format!("unknown nucleus stage {other:?}"))),
        }
    }
}

/// How several classifiers are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionMode {
    /// Multiply token weights into one classifier and take its EAP:
    /// the expectation of the product.
    #[default]
    Composite,
    /// Keep one cache per classifier and multiply their EAPs: the product of
    /// expectations. Differs from `Composite` in general; kept so the gap can
    /// be measured.
    EapProduct,
}

impl FromStr for CompositionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "composite" => Ok(Self::Composite),
            "eap_product" | "eap-product" => Ok(Self::EapProduct),
            other => Err(Error::Input(format!("unknown composition mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub prompt: Vec<usize>,
    pub new_tokens: usize,
    pub top_p: f64,
    pub seed: u64,
    pub decode_transform: Option<LogitTransform>,
    pub samples_per_prompt: usize,
    pub nucleus_stage: NucleusStage,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            prompt: Vec::new(),
            new_tokens: 1,
            top_p: 1.0,
            seed: 0,
            decode_transform: None,
            samples_per_prompt: 1,
            nucleus_stage: NucleusStage::Post,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Input(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if self.new_tokens == 0 {
            return Err(Error::Input("new_tokens must be at least 1".into()));
        }
        if self.samples_per_prompt == 0 {
            return Err(Error::Input("samples_per_prompt must be at least 1".into()));
        }
        Ok(())
    }

    /// Sequence length the backward cache must cover.
    pub fn horizon(&self) -> usize {
        self.prompt.len() + self.new_tokens
    }
}

/// `q(v) ∝ lm(v) * T(eap(v))`, normalized. `T` is the identity when `tf` is
/// `None`.
///
/// Errors with a contradiction (step 0; callers fill in the real step) when
/// no candidate keeps positive mass.
pub fn combined_dist(lm: &[f64], eap_rel: &[f64], tf: Option<&LogitTransform>) -> Result<Vec<f64>> {
    if lm.len() != eap_rel.len() {
        return Err(Error::Input(format!(
            "distribution lengths differ: {} vs {}",
            lm.len(),
            eap_rel.len()
        )));
    }
    let mut q: Vec<f64> = lm
        .iter()
        .zip(eap_rel)
        .map(|(&p, &e)| p * decode_weight(e, tf))
        .collect();
    let total = normalize_in_place(&mut q);
    if !(total > 0.0) {
        return Err(Error::Contradiction { step: 0 });
    }
    Ok(q)
}

/// `T(eap)`. An EAP of exactly zero stays zero under any transform: it comes
/// from a hard zero weight or an unemittable token, and the transform's
/// probability clamp must not resurrect it.
pub fn decode_weight(eap: f64, tf: Option<&LogitTransform>) -> f64 {
    match tf {
        None => eap,
        Some(_) if eap == 0.0 => 0.0,
        Some(tf) => tf.apply(eap),
    }
}

/// Keeps the smallest set of most probable tokens (ties to the lower id)
/// whose mass reaches `p`, renormalized. `p = 1` returns the input as is.
pub fn top_p_filter(dist: &[f64], p: f64) -> Vec<f64> {
    if p >= 1.0 {
        return dist.to_vec();
    }
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut kept = vec![0.0; dist.len()];
    let mut mass = 0.0;
    for &i in &order {
        if dist[i] <= 0.0 {
            break;
        }
        kept[i] = dist[i];
        mass += dist[i];
        if mass >= p {
            break;
        }
    }
    normalize_in_place(&mut kept);
    kept
}

/// Everything computed for one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    /// Base source distribution.
    pub lm: Vec<f64>,
    /// Relative EAP per candidate (product over classifiers in
    /// [`CompositionMode::EapProduct`]).
    pub eap_rel: Vec<f64>,
    /// `T(eap_rel)`.
    pub weight: Vec<f64>,
    /// The distribution actually sampled from.
    pub q: Vec<f64>,
}

/// One generated continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub prompt: Vec<usize>,
    /// Generated tokens only; the prompt is kept separately.
    pub tokens: Vec<usize>,
    /// `sum_t ln p_lm(x_t | x_<t)` over the generated tokens.
    pub logprob_lm: f64,
    /// `T(eap_rel(x_t))` of each chosen token.
    pub eap_trace: Vec<f64>,
    /// `ln q(x_t)` of each chosen token under the sampling distribution.
    #[serde(skip)]
    pub step_logq: Vec<f64>,
}

type CacheSet = Arc<Vec<BackwardCache>>;

/// Decoder bound to one HMM, one guide and one base source. Backward caches
/// are built lazily, once per horizon, and shared by every stream.
pub struct Generator<'a> {
    hmm: &'a Hmm,
    guides: Vec<FactorizedClassifier>,
    mode: CompositionMode,
    source: &'a dyn NextTokenSource,
    caches: Mutex<HashMap<usize, CacheSet>>,
    builds: AtomicUsize,
}

impl<'a> Generator<'a> {
    /// With no classifiers the guide is neutral (all weights one).
    pub fn new(
        hmm: &'a Hmm,
        classifiers: &[FactorizedClassifier],
        mode: CompositionMode,
        source: &'a dyn NextTokenSource,
    ) -> Result<Self> {
        let v = hmm.vocab_size();
        if source.vocab_size() != v {
            return Err(Error::Config(format!(
                "source vocabulary {} differs from model vocabulary {v}",
                source.vocab_size()
            )));
        }
        if let Some(c) = classifiers.iter().find(|c| c.vocab_size() != v) {
            return Err(Error::Config(format!(
                "classifier vocabulary {} differs from model vocabulary {v}",
                c.vocab_size()
            )));
        }
        let guides = match (classifiers, mode) {
            ([], _) => vec![FactorizedClassifier::neutral(v)],
            (_, CompositionMode::EapProduct) => classifiers.to_vec(),
            ([first, rest @ ..], CompositionMode::Composite) => {
                let mut acc = first.clone();
                for c in rest {
                    acc = acc.compose(c)?;
                }
                vec![acc]
            }
        };
        Ok(Self {
            hmm,
            guides,
            mode,
            source,
            caches: Mutex::new(HashMap::new()),
            builds: AtomicUsize::new(0),
        })
    }

    pub fn mode(&self) -> CompositionMode {
        self.mode
    }

    /// The classifiers whose EAPs are multiplied (a single one unless in
    /// [`CompositionMode::EapProduct`]).
    pub fn guides(&self) -> &[FactorizedClassifier] {
        &self.guides
    }

    /// How many backward caches have been built so far.
    pub fn cache_builds(&self) -> usize {
        self.builds.load(Ordering::SeqCst)
    }

    fn caches_for(&self, horizon: usize) -> Result<CacheSet> {
        let mut map = self.caches.lock().expect("cache registry poisoned");
        if let Some(set) = map.get(&horizon) {
            return Ok(set.clone());
        }
        // Built under the lock so concurrent streams never duplicate work.
        let set = self
            .guides
            .iter()
            .map(|g| BackwardCache::build(self.hmm, g, horizon))
            .collect::<Result<Vec<_>>>()?;
        self.builds.fetch_add(set.len(), Ordering::SeqCst);
        let set = Arc::new(set);
        map.insert(horizon, set.clone());
        Ok(set)
    }

    /// The step-`t` distribution given the prefix `x_<t` and its forward
    /// state.
    ///
    /// Weights of the prefix tokens (prompt included) multiply every
    /// candidate's EAP by the same constant, so they drop out of the
    /// normalization and are never evaluated.
    fn step(
        &self,
        caches: &[BackwardCache],
        state: Option<&ForwardState>,
        prefix: &[usize],
        cfg: &GenerationConfig,
    ) -> Result<StepDistribution> {
        let t = prefix.len() + 1;
        let lm = checked_query(self.source, prefix)?;
        let mut eap_rel = vec![1.0; lm.len()];
        for (cache, guide) in caches.iter().zip(&self.guides) {
            let e = cache.eap_scores(self.hmm, guide, state, t)?;
            eap_rel.iter_mut().zip(e).for_each(|(a, b)| *a *= b);
        }
        let tf = cfg.decode_transform.as_ref();
        let weight: Vec<f64> = eap_rel.iter().map(|&e| decode_weight(e, tf)).collect();
        let contradiction = |e: Error| match e {
            Error::Contradiction { .. } => Error::Contradiction { step: t },
            other => other,
        };
        let q = match cfg.nucleus_stage {
            NucleusStage::Post => {
                top_p_filter(&combined_dist(&lm, &weight, None).map_err(contradiction)?, cfg.top_p)
            }
            NucleusStage::Pre => {
                let mut base = lm.clone();
                normalize_in_place(&mut base);
                combined_dist(&top_p_filter(&base, cfg.top_p), &weight, None).map_err(contradiction)?
            }
        };
        Ok(StepDistribution {
            lm,
            eap_rel,
            weight,
            q,
        })
    }

    /// The sampling distribution for the token after `prefix`, in a sequence
    /// of total length `horizon`.
    pub fn distribution_after(
        &self,
        prefix: &[usize],
        horizon: usize,
        cfg: &GenerationConfig,
    ) -> Result<StepDistribution> {
        if prefix.len() >= horizon {
            return Err(Error::Input(format!(
                "prefix of length {} leaves nothing to generate within horizon {horizon}",
                prefix.len()
            )));
        }
        let caches = self.caches_for(horizon)?;
        let state = self.hmm.forward_prefix(prefix)?;
        self.step(&caches, state.as_ref(), prefix, cfg)
    }

    pub fn generate_with_rng(&self, cfg: &GenerationConfig, rng: &mut StreamRng) -> Result<Sample> {
        cfg.validate()?;
        let horizon = cfg.horizon();
        let caches = self.caches_for(horizon)?;
        let mut state = self.hmm.forward_prefix(&cfg.prompt)?;
        let mut seq = cfg.prompt.clone();
        let mut sample = Sample {
            prompt: cfg.prompt.clone(),
            tokens: Vec::with_capacity(cfg.new_tokens),
            logprob_lm: 0.0,
            eap_trace: Vec::with_capacity(cfg.new_tokens),
            step_logq: Vec::with_capacity(cfg.new_tokens),
        };
        while seq.len() < horizon {
            let dist = self.step(&caches, state.as_ref(), &seq, cfg)?;
            let x = sample_index(&dist.q, rng).ok_or(Error::Contradiction { step: seq.len() + 1 })?;
            sample.tokens.push(x);
            sample.logprob_lm += dist.lm[x].ln();
            sample.eap_trace.push(dist.weight[x]);
            sample.step_logq.push(dist.q[x].ln());
            state = Some(match &state {
                None => self.hmm.forward_init(x)?,
                Some(s) => self.hmm.forward_update(s, x)?,
            });
            seq.push(x);
        }
        Ok(sample)
    }

    /// One sample on stream `stream`, seeded with `cfg.seed ^ stream`.
    pub fn generate_stream(&self, cfg: &GenerationConfig, stream: u64) -> Result<Sample> {
        self.generate_with_rng(cfg, &mut stream_rng(cfg.seed ^ stream))
    }

    /// `cfg.samples_per_prompt` samples for each prompt (replacing
    /// `cfg.prompt`), computed in parallel. Sample `j` of prompt `i` uses
    /// stream `i * k + j`, so results do not depend on scheduling.
    pub fn generate_batch(&self, prompts: &[Vec<usize>], cfg: &GenerationConfig) -> Result<Vec<Vec<Sample>>> {
        cfg.validate()?;
        let k = cfg.samples_per_prompt;
        let jobs: Vec<(usize, usize)> = (0..prompts.len())
            .flat_map(|i| (0..k).map(move |j| (i, j)))
            .collect();
        let flat = jobs
            .par_iter()
            .map(|&(i, j)| {
                let local = GenerationConfig {
                    prompt: prompts[i].clone(),
                    ..cfg.clone()
                };
                self.generate_stream(&local, (i * k + j) as u64)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut groups: Vec<Vec<Sample>> = Vec::with_capacity(prompts.len());
        let mut it = flat.into_iter();
        for _ in prompts {
            groups.push(it.by_ref().take(k).collect());
        }
        Ok(groups)
    }
}

/// Writes samples as JSON lines.
pub fn samples_to_jsonl(groups: &[Vec<Sample>]) -> Result<String> {
    let mut out = String::new();
    for s in groups.iter().flatten() {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}
