use sha2::{Digest, Sha256};

use super::{Fingerprint, ForwardState, Hmm};
use crate::classifier::FactorizedClassifier;
use crate::error::{Error, Result};
use crate::logspace::LogSumExp;

/// Backward expectation table `P[t][z] = log E[prod_{i>t} w(x_i) | z_t = z]`
/// for a fixed horizon `n`.
///
/// It depends only on the model, the classifier and `n`, so one cache serves
/// every prefix and every sample of that length.
#[derive(Debug, Clone)]
pub struct BackwardCache {
    horizon: usize,
    h: usize,
    log_expectation: Vec<f64>,
    fingerprint: Fingerprint,
}

fn cache_fingerprint(hmm: &Hmm, cls: &FactorizedClassifier, horizon: usize) -> Fingerprint {
    let mut hasher = Sha256::new();
    hasher.update(b"backward-cache");
    hasher.update(hmm.fingerprint());
    hasher.update(cls.fingerprint());
    hasher.update((horizon as u64).to_le_bytes());
    hasher.finalize().into()
}

impl BackwardCache {
    /// Single right-to-left pass. Row `n` is the empty product (log 1 = 0).
    ///
    /// The per-state emission term `log sum_v p(v|z) w(v)` does not depend on
    /// `t` for a homogeneous model and is computed once up front, so the pass
    /// costs `O(hV + n h^2)`. Reductions run in ascending state/token order.
    pub fn build(hmm: &Hmm, cls: &FactorizedClassifier, horizon: usize) -> Result<Self> {
        if cls.vocab_size() != hmm.vocab_size() {
            return Err(Error::Config(format!(
                "classifier vocabulary {} does not match model vocabulary {}",
                cls.vocab_size(),
                hmm.vocab_size()
            )));
        }
        if horizon == 0 {
            return Err(Error::Input("cache horizon must be >= 1".into()));
        }
        let h = hmm.num_states();
        let mut table = vec![0.0; (horizon + 1) * h];
        // Expectation of the constant 1 is exactly 1; skip the arithmetic so
        // rounding cannot perturb the neutral case.
        if !cls.is_neutral() {
            let lw = cls.log_weights();
            let emit_weight: Vec<f64> = (0..h)
                .map(|z| {
                    let mut acc = LogSumExp::new();
                    for (e, w) in hmm.log_emission_row(z).iter().zip(lw) {
                        acc.push(e + w);
                    }
                    acc.value()
                })
                .collect();
            for t in (0..horizon).rev() {
                let (head, tail) = table.split_at_mut((t + 1) * h);
                let next = &tail[..h];
                let row = &mut head[t * h..];
                for (z, slot) in row.iter_mut().enumerate() {
                    let mut acc = LogSumExp::new();
                    for ((tr, nx), ew) in hmm.log_transition_row(z).iter().zip(next).zip(&emit_weight) {
                        acc.push(tr + nx + ew);
                    }
                    *slot = acc.value().min(0.0);
                }
            }
        }
        debug_assert!(table.iter().all(|x| !x.is_nan()));
        Ok(Self {
            horizon,
            h,
            log_expectation: table,
            fingerprint: cache_fingerprint(hmm, cls, horizon),
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    /// Row `t` of the table, `0 <= t <= n`.
    pub fn row(&self, t: usize) -> &[f64] {
        &self.log_expectation[t * self.h..(t + 1) * self.h]
    }

    /// Checks that this cache was built from exactly `hmm` and `cls`.
    pub fn verify(&self, hmm: &Hmm, cls: &FactorizedClassifier) -> Result<()> {
        if cache_fingerprint(hmm, cls, self.horizon) != self.fingerprint {
            return Err(Error::Config(
                "backward cache is stale: built for a different model or classifier".into(),
            ));
        }
        Ok(())
    }

    /// Relative expected attribute probability of every candidate token at
    /// step `t` (1-based), given the forward state after `x_<t` (`None` when
    /// `t == 1`).
    ///
    /// Returns `EAP_rel(v) = w(v) * sum_z p(z_t = z | x_<t, x_t = v) P[t][z]`,
    /// computed as `N(v) / D(v)` with `m(z) = p(z_t = z | x_<t)`,
    /// `N(v) = w(v) sum_z p(v|z) m(z) P[t][z]` and `D(v) = sum_z p(v|z) m(z)`.
    ///
    /// The full expectation also carries the factor `prod_{i<t} w(x_i)`. It is
    /// the same for every candidate and cancels when the combined next-token
    /// distribution is normalized, so it is never computed. Tokens with
    /// `D(v) = 0` get 0.
    pub fn eap_scores(
        &self,
        hmm: &Hmm,
        cls: &FactorizedClassifier,
        state: Option<&ForwardState>,
        t: usize,
    ) -> Result<Vec<f64>> {
        self.verify(hmm, cls)?;
        if t == 0 || t > self.horizon {
            return Err(Error::Config(format!(
                "step {t} outside cache horizon 1..={}",
                self.horizon
            )));
        }
        let consumed = state.map_or(0, ForwardState::step);
        if consumed + 1 != t {
            return Err(Error::Config(format!(
                "forward state has consumed {consumed} tokens, step {t} needs {}",
                t - 1
            )));
        }
        let log_m = hmm.log_predictive_states(state)?;
        let future = self.row(t);
        let v = hmm.vocab_size();
        let log_f: Vec<f64> = log_m.iter().zip(future).map(|(m, p)| m + p).collect();
        let shift_d = log_m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shift_n = log_f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if shift_d == f64::NEG_INFINITY {
            return Ok(vec![0.0; v]);
        }
        // Both sums in linear space after shifting by their largest log term;
        // the emission pass is then a pair of multiply-adds per entry.
        let mut num = vec![0.0; v];
        let mut den = vec![0.0; v];
        for (z, (&lm, &lf)) in log_m.iter().zip(&log_f).enumerate() {
            if lm == f64::NEG_INFINITY {
                continue;
            }
            let md = (lm - shift_d).exp();
            let mn = (lf - shift_n).exp();
            for ((e, n), d) in hmm.emission_row(z).iter().zip(&mut num).zip(&mut den) {
                *d += md * e;
                *n += mn * e;
            }
        }
        Ok(cls
            .log_weights()
            .iter()
            .enumerate()
            .map(|(x, lw)| {
                let (ln, ld) = if num[x] > 0.0 && den[x] > 0.0 {
                    (shift_n + num[x].ln(), shift_d + den[x].ln())
                } else {
                    // Underflow in the shifted sums: redo this token exactly.
                    log_sums_for(hmm, &log_m, &log_f, x)
                };
                if ld == f64::NEG_INFINITY {
                    0.0
                } else {
                    (lw + ln - ld).exp().min(1.0)
                }
            })
            .collect())
    }
}

/// `(log N(x) / w(x), log D(x))` by streaming log-sum-exp.
fn log_sums_for(hmm: &Hmm, log_m: &[f64], log_f: &[f64], x: usize) -> (f64, f64) {
    let mut num = LogSumExp::new();
    let mut den = LogSumExp::new();
    for (z, (&lm, &lf)) in log_m.iter().zip(log_f).enumerate() {
        let e = hmm.log_emit(z, x);
        den.push(lm + e);
        num.push(lf + e);
    }
    (num.value(), den.value())
}

#[cfg(test)]
mod tests {
    use super::super::test_models::*;
    use super::*;
    use crate::sampling::stream_rng;
    use rand::Rng;

    fn random_classifier(seed: u64, v: usize) -> FactorizedClassifier {
        let mut rng = stream_rng(seed);
        FactorizedClassifier::new((0..v).map(|_| rng.gen::<f64>().ln()).collect()).unwrap()
    }

    fn emission_prob(hmm: &Hmm, z: usize, x: usize) -> f64 {
        hmm.log_emission_row(z)[x].exp()
    }

    /// `sum_{x_{t+1..n}} p(x_{>t} | z_t = z) prod w(x_i)` by enumerating every
    /// continuation and every hidden path.
    fn continuation_sum(hmm: &Hmm, w: &[f64], z0: usize, len: usize) -> f64 {
        let h = hmm.num_states();
        let v = hmm.vocab_size();
        let mut total = 0.0;
        for xc in 0..v.pow(len as u32) {
            let xs: Vec<usize> = (0..len).map(|i| (xc / v.pow(i as u32)) % v).collect();
            let weight: f64 = xs.iter().map(|&x| w[x]).product();
            let mut p = 0.0;
            for zc in 0..h.pow(len as u32) {
                let zs: Vec<usize> = (0..len).map(|i| (zc / h.pow(i as u32)) % h).collect();
                let mut q = 1.0;
                let mut prev = z0;
                for i in 0..len {
                    q *= hmm.log_transition_row(prev)[zs[i]].exp() * emission_prob(hmm, zs[i], xs[i]);
                    prev = zs[i];
                }
                p += q;
            }
            total += p * weight;
        }
        total
    }

    #[test]
    fn neutral_classifier_cache_is_exactly_zero() {
        let hmm = seeded(4, 3, 5);
        let cache = BackwardCache::build(&hmm, &FactorizedClassifier::neutral(5), 6).unwrap();
        for t in 0..=6 {
            assert!(cache.row(t).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn zero_weights_give_neg_inf_rows() {
        let hmm = seeded(4, 3, 5);
        let cls = FactorizedClassifier::from_log_weights_allow_zero(vec![f64::NEG_INFINITY; 5]).unwrap();
        let cache = BackwardCache::build(&hmm, &cls, 4).unwrap();
        for t in 0..4 {
            assert!(cache.row(t).iter().all(|&x| x == f64::NEG_INFINITY));
        }
        assert!(cache.row(4).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cache_entries_match_continuation_enumeration() {
        let hmm = seeded(42, 2, 3);
        let cls = random_classifier(42, 3);
        let w: Vec<f64> = cls.log_weights().iter().map(|l| l.exp()).collect();
        let cache = BackwardCache::build(&hmm, &cls, 5).unwrap();
        for t in [2, 4] {
            for z in 0..2 {
                let bf = continuation_sum(&hmm, &w, z, 5 - t);
                assert!((cache.row(t)[z].exp() - bf).abs() < 1e-9, "t={t} z={z}");
            }
        }
    }

    #[test]
    fn vocab_mismatch_and_stale_cache() {
        let hmm = seeded(1, 2, 3);
        assert!(matches!(
            BackwardCache::build(&hmm, &FactorizedClassifier::neutral(4), 3),
            Err(Error::Config(_))
        ));
        let cls = random_classifier(2, 3);
        let cache = BackwardCache::build(&hmm, &cls, 3).unwrap();
        let other = random_classifier(3, 3);
        assert!(matches!(cache.eap_scores(&hmm, &other, None, 1), Err(Error::Config(_))));
        let other_hmm = seeded(9, 2, 3);
        assert!(matches!(cache.eap_scores(&other_hmm, &cls, None, 1), Err(Error::Config(_))));
    }

    #[test]
    fn step_must_match_state() {
        let hmm = seeded(1, 2, 3);
        let cls = random_classifier(2, 3);
        let cache = BackwardCache::build(&hmm, &cls, 3).unwrap();
        let s = hmm.forward_init(0).unwrap();
        assert!(cache.eap_scores(&hmm, &cls, Some(&s), 2).is_ok());
        assert!(cache.eap_scores(&hmm, &cls, Some(&s), 3).is_err());
        assert!(cache.eap_scores(&hmm, &cls, None, 2).is_err());
        assert!(cache.eap_scores(&hmm, &cls, None, 4).is_err());
    }

    #[test]
    fn neutral_eap_is_one() {
        let hmm = seeded(5, 3, 4);
        let cls = FactorizedClassifier::neutral(4);
        let cache = BackwardCache::build(&hmm, &cls, 4).unwrap();
        let s = hmm.forward_prefix(&[1, 2]).unwrap();
        let eap = cache.eap_scores(&hmm, &cls, s.as_ref(), 3).unwrap();
        assert!(eap.iter().all(|&e| e == 1.0));
    }

    #[test]
    fn zero_weight_token_scores_zero() {
        let hmm = seeded(5, 3, 4);
        let mut lw: Vec<f64> = random_classifier(6, 4).log_weights().to_vec();
        lw[2] = f64::NEG_INFINITY;
        let cls = FactorizedClassifier::from_log_weights_allow_zero(lw).unwrap();
        let cache = BackwardCache::build(&hmm, &cls, 4).unwrap();
        let eap = cache.eap_scores(&hmm, &cls, None, 1).unwrap();
        assert_eq!(eap[2], 0.0);
        assert!(eap.iter().all(|e| (0.0..=1.0).contains(e)));
    }

    #[test]
    fn unemittable_token_scores_zero() {
        let hmm = single_state(&[0.5, 0.5, 0.0]);
        let cls = random_classifier(1, 3);
        let cache = BackwardCache::build(&hmm, &cls, 3).unwrap();
        let eap = cache.eap_scores(&hmm, &cls, None, 1).unwrap();
        assert_eq!(eap[2], 0.0);
        assert!(eap[0] > 0.0);
    }

    #[test]
    fn eap_matches_joint_enumeration() {
        // EAP_rel(v) at t=2: sum over continuations of p(x_{>2} | x_1, v) w(v) prod w.
        let hmm = seeded(42, 2, 3);
        let cls = random_classifier(42, 3);
        let w: Vec<f64> = cls.log_weights().iter().map(|l| l.exp()).collect();
        let cache = BackwardCache::build(&hmm, &cls, 5).unwrap();
        let x1 = 1;
        let state = hmm.forward_init(x1).unwrap();
        let eap = cache.eap_scores(&hmm, &cls, Some(&state), 2).unwrap();
        let v: usize = 3;
        for cand in 0..v {
            let mut num = 0.0;
            let mut den = 0.0;
            for xc in 0..v.pow(3) {
                let mut seq = vec![x1, cand];
                seq.extend((0..3).map(|i| (xc / v.pow(i as u32)) % v));
                let p = hmm.log_likelihood(&seq).unwrap().exp();
                den += p;
                num += p * seq[1..].iter().map(|&x| w[x]).product::<f64>();
            }
            assert!((eap[cand] - num / den).abs() < 1e-9);
        }
    }
}
