use std::sync::Arc;

use trace_core::oracle::{bf_conditional, EnumerationBudget};
use trace_core::sampling::{derive_seed, stream_rng};
use trace_core::source::{hmm_source, NextTokenSource};
use trace_core::{CompositionMode, FactorizedClassifier, GenerationConfig, Generator, Hmm};

const DRAWS: u64 = 10_000;
// Chi-square critical value for 3 degrees of freedom at p = 0.001.
const CHI2_CRIT_DF3: f64 = 16.27;

fn chi_square(counts: &[usize], probs: &[f64], total: f64) -> f64 {
    counts
        .iter()
        .zip(probs)
        .filter(|(_, p)| **p > 0.0)
        .map(|(&c, &p)| {
            let e = p * total;
            (c as f64 - e).powi(2) / e
        })
        .sum()
}

fn first_token_counts(gen: &Generator<'_>, cfg: &GenerationConfig, v: usize) -> Vec<usize> {
    let mut counts = vec![0; v];
    for stream in 0..DRAWS {
        let s = gen.generate_stream(cfg, stream).unwrap();
        counts[s.tokens[0]] += 1;
    }
    counts
}

#[test]
fn neutral_guide_samples_the_base_distribution() {
    let hmm = Hmm::random(3, 4, &mut stream_rng(41)).unwrap();
    let lm = hmm_source(Arc::new(hmm.clone()));
    let gen = Generator::new(&hmm, &[FactorizedClassifier::neutral(4)], CompositionMode::Composite, &lm).unwrap();
    let cfg = GenerationConfig {
        prompt: vec![2, 0],
        new_tokens: 3,
        top_p: 1.0,
        seed: 7,
        ..Default::default()
    };
    let counts = first_token_counts(&gen, &cfg, 4);
    let probs = lm.query(&cfg.prompt).unwrap();
    let stat = chi_square(&counts, &probs, DRAWS as f64);
    assert!(stat < CHI2_CRIT_DF3, "chi-square {stat}, counts {counts:?}, probs {probs:?}");
}

#[test]
fn guided_samples_follow_the_exact_conditional() {
    let hmm = Hmm::random(2, 4, &mut stream_rng(42)).unwrap();
    let lm = hmm_source(Arc::new(hmm.clone()));
    let cls = FactorizedClassifier::new(vec![0.0, -1.5, -0.2, -3.0]).unwrap();
    let gen = Generator::new(&hmm, std::slice::from_ref(&cls), CompositionMode::Composite, &lm).unwrap();
    let cfg = GenerationConfig {
        prompt: vec![1],
        new_tokens: 3,
        top_p: 1.0,
        seed: 8,
        ..Default::default()
    };
    let counts = first_token_counts(&gen, &cfg, 4);
    let exact = bf_conditional(&lm, &cls, &cfg.prompt, 2, 4, EnumerationBudget::default()).unwrap();
    let stat = chi_square(&counts, &exact, DRAWS as f64);
    assert!(stat < CHI2_CRIT_DF3, "chi-square {stat}, counts {counts:?}, exact {exact:?}");
}

#[test]
fn batch_samples_equal_their_sequential_streams() {
    let hmm = Hmm::random(3, 5, &mut stream_rng(43)).unwrap();
    let lm = hmm_source(Arc::new(hmm.clone()));
    let gen = Generator::new(&hmm, &[], CompositionMode::Composite, &lm).unwrap();
    let cfg = GenerationConfig {
        new_tokens: 6,
        samples_per_prompt: 4,
        seed: 11,
        ..Default::default()
    };
    let prompts = vec![vec![0], vec![3, 1], vec![4]];
    let batch = gen.generate_batch(&prompts, &cfg).unwrap();
    assert_eq!(batch, gen.generate_batch(&prompts, &cfg).unwrap());
    for (i, group) in batch.iter().enumerate() {
        assert_eq!(group.len(), 4);
        for (j, sample) in group.iter().enumerate() {
            let local = GenerationConfig {
                prompt: prompts[i].clone(),
                ..cfg.clone()
            };
            assert_eq!(*sample, gen.generate_stream(&local, (i * 4 + j) as u64).unwrap());
        }
    }
    assert_ne!(derive_seed(11, "a"), derive_seed(11, "b"));
}
