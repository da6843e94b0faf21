use super::Hmm;
use crate::error::{Error, Result};
use crate::logspace::{log_sum_exp, LogSumExp};

/// Forward message for an observed prefix: `log_alpha[z] = log p(z_t = z, x_<=t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardState {
    step: usize,
    log_alpha: Vec<f64>,
    log_evidence: f64,
}

impl ForwardState {
    fn from_alpha(step: usize, log_alpha: Vec<f64>) -> Self {
        let log_evidence = log_sum_exp(&log_alpha);
        debug_assert!(!log_evidence.is_nan());
        Self {
            step,
            log_alpha,
            log_evidence,
        }
    }

    /// Number of tokens consumed so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn log_alpha(&self) -> &[f64] {
        &self.log_alpha
    }

    /// `log p(x_<=t)`.
    pub fn log_evidence(&self) -> f64 {
        self.log_evidence
    }

    /// Filtering distribution `p(z_t | x_<=t)`.
    pub fn posterior(&self) -> Result<Vec<f64>> {
        if self.log_evidence == f64::NEG_INFINITY {
            return Err(Error::DegenerateEvidence);
        }
        Ok(self
            .log_alpha
            .iter()
            .map(|a| (a - self.log_evidence).exp())
            .collect())
    }
}

impl Hmm {
    pub fn forward_init(&self, token: usize) -> Result<ForwardState> {
        self.check_token(token)?;
        let alpha = (0..self.h)
            .map(|z| self.log_initial[z] + self.log_emit(z, token))
            .collect();
        Ok(ForwardState::from_alpha(1, alpha))
    }

    /// One step of the forward recursion. The input state is left untouched.
    pub fn forward_update(&self, state: &ForwardState, token: usize) -> Result<ForwardState> {
        self.check_token(token)?;
        if state.log_alpha.len() != self.h {
            return Err(Error::Config("forward state does not belong to this model".into()));
        }
        let alpha = self
            .propagate(&state.log_alpha)
            .into_iter()
            .enumerate()
            .map(|(z, m)| m + self.log_emit(z, token))
            .collect();
        Ok(ForwardState::from_alpha(state.step + 1, alpha))
    }

    /// Runs the forward recursion over a whole prefix. `None` for the empty prefix.
    pub fn forward_prefix(&self, prefix: &[usize]) -> Result<Option<ForwardState>> {
        let Some((first, rest)) = prefix.split_first() else {
            return Ok(None);
        };
        let mut state = self.forward_init(*first)?;
        for &tok in rest {
            state = self.forward_update(&state, tok)?;
        }
        Ok(Some(state))
    }

    /// `out[b] = logsumexp_a (log_vec[a] + log_transition[a][b])`, summing
    /// over `a` in ascending order.
    pub(crate) fn propagate(&self, log_vec: &[f64]) -> Vec<f64> {
        let h = self.h;
        let mut acc = vec![LogSumExp::new(); h];
        for (a, &la) in log_vec.iter().enumerate() {
            if la == f64::NEG_INFINITY {
                continue;
            }
            let row = self.log_transition_row(a);
            for (slot, &t) in acc.iter_mut().zip(row) {
                slot.push(la + t);
            }
        }
        acc.iter().map(LogSumExp::value).collect()
    }

    /// Log predictive state distribution `log p(z_t | x_<t)`.
    ///
    /// With no prefix this is the initial distribution.
    pub fn log_predictive_states(&self, state: Option<&ForwardState>) -> Result<Vec<f64>> {
        match state {
            None => Ok(self.log_initial.clone()),
            Some(s) => {
                if s.log_evidence == f64::NEG_INFINITY {
                    return Err(Error::DegenerateEvidence);
                }
                if s.log_alpha.len() != self.h {
                    return Err(Error::Config(
                        "forward state does not belong to this model".into(),
                    ));
                }
                let normalized: Vec<f64> =
                    s.log_alpha.iter().map(|a| a - s.log_evidence).collect();
                Ok(self.propagate(&normalized))
            }
        }
    }

    /// Unnormalized log token marginal `log D(v) = log sum_z p(v|z) m(z)` for a
    /// log predictive state vector `m`.
    pub(crate) fn log_token_marginal(&self, log_m: &[f64]) -> Vec<f64> {
        let mut acc = vec![LogSumExp::new(); self.v];
        for (z, &lm) in log_m.iter().enumerate() {
            if lm == f64::NEG_INFINITY {
                continue;
            }
            for (slot, &e) in acc.iter_mut().zip(self.log_emission_row(z)) {
                slot.push(lm + e);
            }
        }
        acc.iter().map(LogSumExp::value).collect()
    }

    /// `p(x_t = v | x_<t)`; `state` is the forward state after `x_<t`.
    pub fn next_token_dist(&self, state: Option<&ForwardState>) -> Result<Vec<f64>> {
        let log_m = self.log_predictive_states(state)?;
        let log_d = self.log_token_marginal(&log_m);
        let total = log_sum_exp(&log_d);
        if total == f64::NEG_INFINITY {
            return Err(Error::DegenerateEvidence);
        }
        Ok(log_d.iter().map(|d| (d - total).exp()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_models::*;
    use super::*;
    use rand::Rng;

    use crate::sampling::stream_rng;

    fn enumerate_paths(h: usize, n: usize) -> Vec<Vec<usize>> {
        (0..h.pow(n as u32))
            .map(|mut c| {
                (0..n)
                    .map(|_| {
                        let z = c % h;
                        c /= h;
                        z
                    })
                    .collect()
            })
            .collect()
    }

    fn joint(hmm: &Hmm, path: &[usize], tokens: &[usize]) -> f64 {
        let mut p = hmm.log_initial()[path[0]].exp() * hmm.log_emit(path[0], tokens[0]).exp();
        for i in 1..path.len() {
            p *= hmm.log_transition_row(path[i - 1])[path[i]].exp()
                * hmm.log_emit(path[i], tokens[i]).exp();
        }
        p
    }

    #[test]
    fn init_single_state() {
        let hmm = single_state(&[0.1, 0.2, 0.7]);
        let s = hmm.forward_init(2).unwrap();
        assert_eq!(s.step(), 1);
        assert_eq!(s.log_alpha(), &[0.7f64.ln()]);
        assert!(hmm.forward_init(3).is_err());
    }

    #[test]
    fn init_matches_joint_table() {
        let hmm = seeded(7, 3, 4);
        for x in 0..4 {
            let s = hmm.forward_init(x).unwrap();
            for z in 0..3 {
                let direct = hmm.log_initial()[z].exp() * hmm.log_emission_row(z)[x].exp();
                assert!((s.log_alpha()[z].exp() - direct).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn deterministic_emission_gives_one_hot() {
        let hmm = deterministic(3);
        let s = hmm.forward_init(0).unwrap();
        assert_eq!(s.posterior().unwrap(), vec![1.0, 0.0, 0.0]);
        let s = hmm.forward_update(&s, 1).unwrap();
        assert_eq!(s.posterior().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn update_single_state_adds_emission() {
        let hmm = single_state(&[0.1, 0.2, 0.7]);
        let s0 = hmm.forward_init(0).unwrap();
        let s1 = hmm.forward_update(&s0, 1).unwrap();
        assert!((s1.log_evidence() - (s0.log_evidence() + 0.2f64.ln())).abs() < 1e-15);
        assert_eq!(s0.step(), 1);
        assert_eq!(s1.step(), 2);
    }

    #[test]
    fn uniform_transition_erases_history() {
        let h = 3;
        let transition = vec![vec![1.0 / 3.0; 3]; 3];
        let emission = vec![
            vec![0.6, 0.3, 0.1],
            vec![0.2, 0.2, 0.6],
            vec![0.1, 0.5, 0.4],
        ];
        let hmm = Hmm::from_probs(&[0.5, 0.3, 0.2], &transition, &emission).unwrap();
        let s = hmm.forward_init(0).unwrap();
        let s = hmm.forward_update(&s, 1).unwrap();
        let post = s.posterior().unwrap();
        let col: Vec<f64> = (0..h).map(|z| emission[z][1]).collect();
        let total: f64 = col.iter().sum();
        for z in 0..h {
            assert!((post[z] - col[z] / total).abs() < 1e-12);
        }
    }

    #[test]
    fn chained_updates_match_log_likelihood() {
        let mut rng = stream_rng(99);
        for seed in 0..20 {
            let hmm = seeded(seed, 1 + (seed as usize % 5), 2 + (seed as usize % 4));
            let tokens: Vec<usize> = (0..12).map(|_| rng.gen_range(0..hmm.vocab_size())).collect();
            let state = hmm.forward_prefix(&tokens).unwrap().unwrap();
            let ll = hmm.log_likelihood(&tokens).unwrap();
            assert!((state.log_evidence() - ll).abs() <= 1e-12);
            assert_eq!(state.step(), 12);
        }
    }

    #[test]
    fn posterior_matches_path_enumeration() {
        let hmm = seeded(42, 2, 3);
        let tokens = [2, 0, 1, 1];
        let state = hmm.forward_prefix(&tokens).unwrap().unwrap();
        let post = state.posterior().unwrap();
        assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut ends = [0.0; 2];
        for path in enumerate_paths(2, 4) {
            ends[path[3]] += joint(&hmm, &path, &tokens);
        }
        let total: f64 = ends.iter().sum();
        for z in 0..2 {
            assert!((post[z] - ends[z] / total).abs() < 1e-9);
        }
    }

    #[test]
    fn posterior_of_impossible_prefix_errors() {
        let hmm = single_state(&[0.5, 0.5, 0.0]);
        let s = hmm.forward_init(2).unwrap();
        assert!(matches!(s.posterior(), Err(Error::DegenerateEvidence)));
        assert!(matches!(hmm.next_token_dist(Some(&s)), Err(Error::DegenerateEvidence)));
        assert_eq!(single_state(&[1.0, 0.0]).forward_init(0).unwrap().posterior().unwrap(), vec![1.0]);
    }

    #[test]
    fn next_token_dist_cases() {
        let hmm = single_state(&[0.1, 0.2, 0.7]);
        let s = hmm.forward_init(0).unwrap();
        let d = hmm.next_token_dist(Some(&s)).unwrap();
        for (a, b) in d.iter().zip([0.1, 0.2, 0.7]) {
            assert!((a - b).abs() < 1e-15);
        }

        let hmm = seeded(3, 3, 4);
        let first = hmm.next_token_dist(None).unwrap();
        for v in 0..4 {
            let direct: f64 = (0..3)
                .map(|z| hmm.log_initial()[z].exp() * hmm.log_emission_row(z)[v].exp())
                .sum();
            assert!((first[v] - direct).abs() < 1e-15);
        }

        let hmm = seeded(42, 2, 3);
        let prefix = [1, 0, 2];
        let state = hmm.forward_prefix(&prefix).unwrap().unwrap();
        let dist = hmm.next_token_dist(Some(&state)).unwrap();
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let paths = enumerate_paths(2, 4);
        let mut cond = [0.0; 3];
        for v in 0..3 {
            let tokens = [prefix[0], prefix[1], prefix[2], v];
            cond[v] = paths.iter().map(|p| joint(&hmm, p, &tokens)).sum();
        }
        let total: f64 = cond.iter().sum();
        for v in 0..3 {
            assert!((dist[v] - cond[v] / total).abs() < 1e-12);
        }
    }
}
