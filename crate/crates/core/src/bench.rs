//! Wall-clock timing of the per-step EAP computation, the forward update and
//! the backward cache build.

use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::Serialize;

use crate::classifier::FactorizedClassifier;
use crate::error::Result;
use crate::hmm::{BackwardCache, Hmm};
use crate::sampling::{derive_seed, stream_rng};
use crate::source::NextTokenSource;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchConfig {
    /// Timed repetitions; the median is reported.
    pub reps: usize,
    /// Each repetition runs for at least this long (calls are batched).
    pub min_rep_time: Duration,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            reps: 7,
            min_rep_time: Duration::from_millis(20),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub op: &'static str,
    pub h: usize,
    pub v: usize,
    pub n: usize,
    /// Median seconds per call.
    pub seconds: f64,
}

/// Median seconds per call of `f`.
pub fn time_per_call<F: FnMut()>(cfg: &BenchConfig, mut f: F) -> f64 {
    // Calibrate a batch size that fills `min_rep_time`.
    let mut inner = 1usize;
    loop {
        let start = Instant::now();
        for _ in 0..inner {
            f();
        }
        if start.elapsed() >= cfg.min_rep_time || inner >= 1 << 24 {
            break;
        }
        inner *= 2;
    }
    let mut samples: Vec<f64> = (0..cfg.reps.max(1))
        .map(|_| {
            let start = Instant::now();
            for _ in 0..inner {
                f();
            }
            start.elapsed().as_secs_f64() / inner as f64
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    samples[samples.len() / 2]
}

fn instance(h: usize, v: usize, seed: u64) -> Result<(Hmm, FactorizedClassifier)> {
    let mut rng = stream_rng(derive_seed(seed, &format!("bench-{h}-{v}")));
    let hmm = Hmm::random(h, v, &mut rng)?;
    let cls = FactorizedClassifier::new((0..v).map(|_| -2.0 * rng.gen::<f64>()).collect())?;
    Ok((hmm, cls))
}

/// One `eap_scores` call at step 2 of a length-4 horizon.
pub fn time_eap(h: usize, v: usize, cfg: &BenchConfig) -> Result<TimingRow> {
    let (hmm, cls) = instance(h, v, cfg.seed)?;
    let cache = BackwardCache::build(&hmm, &cls, 4)?;
    let state = hmm.forward_init(0)?;
    let seconds = time_per_call(cfg, || {
        black_box(cache.eap_scores(&hmm, &cls, Some(black_box(&state)), 2).expect("valid step"));
    });
    Ok(TimingRow { op: "eap_scores", h, v, n: 4, seconds })
}

pub fn time_forward_update(h: usize, v: usize, cfg: &BenchConfig) -> Result<TimingRow> {
    let (hmm, _) = instance(h, v, cfg.seed)?;
    let state = hmm.forward_init(0)?;
    let seconds = time_per_call(cfg, || {
        black_box(hmm.forward_update(black_box(&state), 1).expect("valid token"));
    });
    Ok(TimingRow { op: "forward_update", h, v, n: 1, seconds })
}

pub fn time_cache_build(h: usize, v: usize, n: usize, cfg: &BenchConfig) -> Result<TimingRow> {
    let (hmm, cls) = instance(h, v, cfg.seed)?;
    let seconds = time_per_call(cfg, || {
        black_box(BackwardCache::build(black_box(&hmm), &cls, n).expect("valid cache"));
    });
    Ok(TimingRow { op: "cache_build", h, v, n, seconds })
}

/// Source round-trip time versus the same round-trip plus one EAP step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadReport {
    pub source_seconds: f64,
    pub eap_seconds: f64,
    /// `(source + eap) / source`: the slowdown guided decoding adds per step.
    pub ratio: f64,
}

pub fn guided_overhead(
    source: &dyn NextTokenSource,
    hmm: &Hmm,
    cls: &FactorizedClassifier,
    cfg: &BenchConfig,
) -> Result<OverheadReport> {
    let cache = BackwardCache::build(hmm, cls, 2)?;
    let prefix = [0usize];
    let state = hmm.forward_prefix(&prefix)?;
    source.query(&prefix)?;
    let source_seconds = time_per_call(cfg, || {
        black_box(source.query(black_box(&prefix)).expect("source query"));
    });
    let eap_seconds = time_per_call(cfg, || {
        black_box(cache.eap_scores(hmm, cls, state.as_ref(), 2).expect("valid step"));
    });
    Ok(OverheadReport {
        source_seconds,
        eap_seconds,
        ratio: (source_seconds + eap_seconds) / source_seconds,
    })
}

/// All three operations over the grid (`ns` only affects cache builds).
pub fn run_grid(hs: &[usize], vs: &[usize], ns: &[usize], cfg: &BenchConfig) -> Result<Vec<TimingRow>> {
    let mut rows = Vec::new();
    for &h in hs {
        for &v in vs {
            rows.push(time_eap(h, v, cfg)?);
            rows.push(time_forward_update(h, v, cfg)?);
            for &n in ns {
                rows.push(time_cache_build(h, v, n, cfg)?);
            }
        }
    }
    Ok(rows)
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("op,h,v,n,seconds\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{:.6e}\n", r.op, r.h, r.v, r.n, r.seconds));
    }
    out
}
