use proptest::prelude::*;
use trace_core::distill::{
    corpus_from_hmm, corpus_log_likelihood, em_fit, em_fit_observed, per_token_log_likelihood, Corpus, EmConfig,
    StepSchedule,
};
use trace_core::sampling::stream_rng;
use trace_core::Hmm;

fn truth(seed: u64, h: usize, v: usize) -> Hmm {
    Hmm::random(h, v, &mut stream_rng(seed)).unwrap()
}

#[test]
fn corpus_rejects_ragged_and_out_of_range_sequences() {
    assert!(Corpus::new(3, vec![vec![0, 1], vec![2]]).is_err());
    assert!(Corpus::new(3, vec![vec![0, 3]]).is_err());
    let empty = Corpus::new(3, vec![]).unwrap();
    assert!(em_fit(&empty, &EmConfig::new(2, 0)).is_err());
    let c = Corpus::new(3, vec![vec![0, 1, 2], vec![2, 2, 1]]).unwrap();
    assert_eq!((c.len(), c.sequence_length(), c.num_tokens()), (2, 3, 6));
}

#[test]
fn corpus_jsonl_round_trips() {
    let c = corpus_from_hmm(&truth(1, 3, 5), 20, 7, 4).unwrap();
    let back = Corpus::from_jsonl(5, &c.to_jsonl().unwrap()).unwrap();
    assert_eq!(back, c);
    let (a, b) = c.split_at(15);
    assert_eq!((a.len(), b.len()), (15, 5));
}

#[test]
fn full_batch_em_never_lowers_the_likelihood() {
    let corpus = corpus_from_hmm(&truth(2, 3, 4), 200, 10, 5).unwrap();
    let mut cfg = EmConfig::full_batch(3, 25, 6);
    cfg.smoothing = 0.0;
    let mut history = Vec::new();
    em_fit_observed(&corpus, &cfg, None, |r| {
        history.push(per_token_log_likelihood(r.hmm, &corpus).unwrap());
    })
    .unwrap();
    assert_eq!(history.len(), 25);
    for w in history.windows(2) {
        assert!(w[1] >= w[0] - 1e-9, "likelihood fell: {w:?}");
    }
}

#[test]
fn one_state_em_recovers_token_frequencies() {
    let corpus = Corpus::new(3, vec![vec![0, 0, 1, 2], vec![0, 1, 1, 0]]).unwrap();
    let hmm = em_fit(&corpus, &EmConfig::full_batch(1, 3, 0)).unwrap();
    let freq = [4.0 / 8.0, 3.0 / 8.0, 1.0 / 8.0];
    for (e, f) in hmm.log_emission_row(0).iter().zip(freq) {
        assert!((e.exp() - f).abs() < 1e-5, "{} vs {f}", e.exp());
    }
}

#[test]
fn mini_batch_em_approaches_the_generating_model() {
    let gen = truth(3, 3, 6);
    let corpus = corpus_from_hmm(&gen, 3000, 12, 8).unwrap();
    let (train, held) = corpus.split_at(2500);
    let cfg = EmConfig {
        epochs: 30,
        batch_size: 256,
        step_schedule: StepSchedule { start: 1.0, end: 0.2 },
        ..EmConfig::new(3, 9)
    };
    let fitted = em_fit(&train, &cfg).unwrap();
    let ll_fit = per_token_log_likelihood(&fitted, &held).unwrap();
    let ll_true = per_token_log_likelihood(&gen, &held).unwrap();
    assert!((ll_true - ll_fit) / ll_true.abs() < 0.02, "fit {ll_fit} vs truth {ll_true}");
}

#[test]
fn em_is_deterministic_given_its_seed() {
    let corpus = corpus_from_hmm(&truth(4, 2, 4), 300, 6, 1).unwrap();
    let cfg = EmConfig {
        epochs: 4,
        batch_size: 64,
        ..EmConfig::new(4, 12)
    };
    assert_eq!(em_fit(&corpus, &cfg).unwrap().fingerprint(), em_fit(&corpus, &cfg).unwrap().fingerprint());
}

#[test]
fn bad_configs_are_rejected() {
    let corpus = corpus_from_hmm(&truth(5, 2, 3), 10, 4, 1).unwrap();
    for cfg in [
        EmConfig::new(0, 0),
        EmConfig { batch_size: 0, ..EmConfig::new(2, 0) },
        EmConfig { smoothing: -1.0, ..EmConfig::new(2, 0) },
        EmConfig { step_schedule: StepSchedule { start: 1.5, end: 0.5 }, ..EmConfig::new(2, 0) },
    ] {
        assert!(em_fit(&corpus, &cfg).is_err(), "{cfg:?}");
    }
    assert!(corpus_log_likelihood(&truth(5, 2, 4), &corpus).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn corpus_likelihood_matches_the_forward_pass(seed in any::<u64>(), h in 1usize..4) {
        let hmm = truth(seed, h, 4);
        let corpus = corpus_from_hmm(&hmm, 8, 5, seed).unwrap();
        let by_forward: f64 = corpus.sequences().iter().map(|s| hmm.log_likelihood(s).unwrap()).sum();
        let scaled = corpus_log_likelihood(&hmm, &corpus).unwrap();
        prop_assert!((by_forward - scaled).abs() <= 1e-9 * by_forward.abs());
    }

    #[test]
    fn em_output_is_a_valid_model(seed in any::<u64>(), h in 1usize..4) {
        let corpus = corpus_from_hmm(&truth(seed, 2, 3), 30, 5, seed).unwrap();
        let cfg = EmConfig { epochs: 2, batch_size: 8, ..EmConfig::new(h, seed) };
        let hmm = em_fit(&corpus, &cfg).unwrap();
        for z in 0..h {
            let s: f64 = hmm.log_emission_row(z).iter().map(|e| e.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            let s: f64 = hmm.log_transition_row(z).iter().map(|e| e.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
