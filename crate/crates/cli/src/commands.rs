use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use rand::Rng;
use serde_json::{json, Value};

use trace_core::bench::{self, BenchConfig};
use trace_core::classifier::{fit, FitConfig};
use trace_core::decoder::{samples_to_jsonl, CompositionMode, GenerationConfig, Generator, NucleusStage, Sample};
use trace_core::distill::{corpus_from_source, em_fit_observed, per_token_log_likelihood, Corpus, EmConfig};
use trace_core::eval::{evaluate, sweep, sweep_csv, AttributeScorer, ClassifierViolation, CountScorer};
use trace_core::oracle::{bf_conditional, bf_eap, bf_sequence_prob, EnumerationBudget};
use trace_core::sampling::{derive_seed, stream_rng};
use trace_core::source::{
    hmm_source, remote_source, table_source, Endpoint, NextTokenSource, RemoteSourceConfig, TableSource,
};
use trace_core::{BackwardCache, FactorizedClassifier, Hmm, LogitTransform, TrainingExample};

use crate::manifest::{default_path, RunManifest};
use crate::{
    BenchArgs, Cli, Command, ComposeArgs, DecodeArgs, DistillArgs, EvalArgs, FitClassifierArgs, GenerateArgs,
    OracleCheckArgs, SampleCorpusArgs, ScorerArgs, SourceArgs, SweepArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    let (name, out) = match &cli.command {
        Command::Distill(a) => ("distill", Some(a.out.as_path())),
        Command::SampleCorpus(a) => ("sample-corpus", a.out.as_deref()),
        Command::FitClassifier(a) => ("fit-classifier", Some(a.out.as_path())),
        Command::Compose(a) => ("compose", Some(a.out.as_path())),
        Command::Generate(a) => ("generate", a.out.as_deref()),
        Command::Eval(a) => ("eval", a.out.as_deref()),
        Command::Sweep(a) => ("sweep", a.out.as_deref()),
        Command::OracleCheck(a) => ("oracle-check", a.out.as_deref()),
        Command::Bench(a) => ("bench", a.out.as_deref()),
    };
    let config = serde_json::to_value(&cli.command)?;
    let config = config.get(name).cloned().unwrap_or(config);
    let mut m = RunManifest::new(name, config, None);
    match &cli.command {
        Command::Distill(a) => distill(a, &mut m)?,
        Command::SampleCorpus(a) => sample_corpus(a, &mut m)?,
        Command::FitClassifier(a) => fit_classifier(a, &mut m)?,
        Command::Compose(a) => compose(a, &mut m)?,
        Command::Generate(a) => generate(a, &mut m)?,
        Command::Eval(a) => eval(a, &mut m)?,
        Command::Sweep(a) => sweep_cmd(a, &mut m)?,
        Command::OracleCheck(a) => oracle_check(a, &mut m)?,
        Command::Bench(a) => bench_cmd(a, &mut m)?,
    }
    let path = cli.manifest.clone().unwrap_or_else(|| default_path(name, out));
    m.finish(&path)?;
    Ok(())
}

/// Writes `text` to `out`, or to stdout when no path is given.
fn emit(out: Option<&Path>, text: &str, m: &mut RunManifest) -> Result<()> {
    match out {
        Some(p) => {
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
            m.artifact(p);
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn load_hmm(path: &Path, m: &mut RunManifest) -> Result<Hmm> {
    m.input(path)?;
    Hmm::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_classifier(path: &Path, m: &mut RunManifest) -> Result<FactorizedClassifier> {
    m.input(path)?;
    FactorizedClassifier::load(path).with_context(|| format!("loading classifier {}", path.display()))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path, m: &mut RunManifest) -> Result<Vec<T>> {
    m.input(path)?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1))
        })
        .collect()
}

/// Builds the base source. `model` is the already loaded `--hmm`, used when
/// `--source hmm` has no `--source-hmm` of its own and to size remote
/// vocabularies.
fn build_source(args: &SourceArgs, model: Option<&Hmm>, m: &mut RunManifest) -> Result<Box<dyn NextTokenSource>> {
    let spec = args.source.as_str();
    if spec == "hmm" {
        let hmm = match (&args.source_hmm, model) {
            (Some(p), _) => load_hmm(p, m)?,
            (None, Some(h)) => h.clone(),
            (None, None) => bail!(trace_core::Error::Input("--source hmm needs --hmm or --source-hmm".into())),
        };
        return Ok(Box::new(hmm_source(Arc::new(hmm))));
    }
    if spec == "table" {
        let Some(p) = &args.table else {
            bail!(trace_core::Error::Input("--source table needs --table FILE".into()));
        };
        m.input(p)?;
        let table = TableSource::load(p).with_context(|| format!("loading table {}", p.display()))?;
        return Ok(Box::new(table_source(table)));
    }
    let endpoint = if let Some(url) = spec.strip_prefix("remote:") {
        Endpoint::Http(url.to_string())
    } else if let Some(cmd) = spec.strip_prefix("stdio:") {
        Endpoint::Stdio(cmd.to_string())
    } else {
        bail!(trace_core::Error::Input(format!(
            "unknown --source {spec:?}; expected hmm, table, remote:URL or stdio:CMD"
        )));
    };
    let vocab_size = match (args.vocab, model) {
        (Some(v), _) => v,
        (None, Some(h)) => h.vocab_size(),
        (None, None) => bail!(trace_core::Error::Input("remote sources need --vocab or --hmm".into())),
    };
    Ok(Box::new(remote_source(RemoteSourceConfig {
        endpoint,
        timeout_ms: args.timeout_ms,
        vocab_size,
    })?))
}

fn build_scorer(args: &ScorerArgs, m: &mut RunManifest) -> Result<Box<dyn AttributeScorer>> {
    match (&args.scorer_classifier, &args.scorer_count) {
        (Some(p), None) => Ok(Box::new(ClassifierViolation(load_classifier(p, m)?))),
        (None, Some(p)) => {
            m.input(p)?;
            let text = std::fs::read_to_string(p)?;
            let scorer: CountScorer = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            Ok(Box::new(scorer))
        }
        _ => bail!(trace_core::Error::Input(
            "give exactly one of --scorer-classifier or --scorer-count".into()
        )),
    }
}

/// Checked decoding settings, built before anything is loaded.
struct DecodePlan {
    config: GenerationConfig,
    composition: CompositionMode,
}

fn plan_decode(a: &DecodeArgs) -> Result<DecodePlan> {
    let decode_transform = match (a.decode_b, a.decode_c) {
        (None, None) => None,
        (b, c) => Some(LogitTransform::new(b.unwrap_or(1.0), c.unwrap_or(0.0))?),
    };
    let config = GenerationConfig {
        prompt: Vec::new(),
        new_tokens: a.new_tokens,
        top_p: a.top_p,
        seed: a.seed,
        decode_transform,
        samples_per_prompt: a.k,
        nucleus_stage: a.nucleus_stage.parse::<NucleusStage>()?,
    };
    config.validate()?;
    Ok(DecodePlan {
        config,
        composition: a.composition.parse()?,
    })
}

struct Loaded {
    hmm: Hmm,
    classifiers: Vec<FactorizedClassifier>,
    source: Box<dyn NextTokenSource>,
    prompts: Vec<Vec<usize>>,
}

fn load_decode(a: &DecodeArgs, m: &mut RunManifest) -> Result<Loaded> {
    let hmm = load_hmm(&a.hmm, m)?;
    let classifiers = a
        .classifier
        .iter()
        .map(|p| load_classifier(p, m))
        .collect::<Result<Vec<_>>>()?;
    let prompts = match &a.prompt_file {
        Some(p) => read_jsonl::<Vec<usize>>(p, m)?,
        None => vec![Vec::new()],
    };
    if prompts.is_empty() {
        bail!(trace_core::Error::Input("prompt file holds no prompts".into()));
    }
    let source = build_source(&a.source, Some(&hmm), m)?;
    Ok(Loaded {
        hmm,
        classifiers,
        source,
        prompts,
    })
}

fn record_streams(m: &mut RunManifest, seed: u64) {
    m.seed = Some(seed);
    m.seed_label("streams", "seed ^ (prompt_index * k + sample_index)");
}

fn generate(a: &GenerateArgs, m: &mut RunManifest) -> Result<()> {
    let plan = plan_decode(&a.decode)?;
    let l = load_decode(&a.decode, m)?;
    record_streams(m, plan.config.seed);
    let gen = Generator::new(&l.hmm, &l.classifiers, plan.composition, l.source.as_ref())?;
    let start = Instant::now();
    let groups = gen.generate_batch(&l.prompts, &plan.config)?;
    m.timing("generate_seconds", start.elapsed().as_secs_f64());
    m.extra.insert("cache_builds".into(), json!(gen.cache_builds()));
    emit(a.out.as_deref(), &samples_to_jsonl(&groups)?, m)
}

fn group_samples(samples: Vec<Sample>, k: Option<usize>) -> Result<Vec<Vec<Sample>>> {
    if let Some(k) = k {
        if k == 0 || !samples.len().is_multiple_of(k) {
            bail!(trace_core::Error::Input(format!(
                "{} samples do not split into groups of {k}",
                samples.len()
            )));
        }
        let mut it = samples.into_iter();
        let mut groups = Vec::new();
        loop {
            let g: Vec<Sample> = it.by_ref().take(k).collect();
            if g.is_empty() {
                return Ok(groups);
            }
            groups.push(g);
        }
    }
    let mut groups: Vec<Vec<Sample>> = Vec::new();
    for s in samples {
        match groups.last_mut() {
            Some(g) if g[0].prompt == s.prompt => g.push(s),
            _ => groups.push(vec![s]),
        }
    }
    Ok(groups)
}

fn eval(a: &EvalArgs, m: &mut RunManifest) -> Result<()> {
    let samples: Vec<Sample> = read_jsonl(&a.samples, m)?;
    let scorer = build_scorer(&a.scorer, m)?;
    let hmm = a.hmm.as_ref().map(|p| load_hmm(p, m)).transpose()?;
    let source = build_source(&a.source, hmm.as_ref(), m)?;
    let groups = group_samples(samples, a.k)?;
    let report = evaluate(&groups, scorer.as_ref(), source.as_ref(), a.scorer.threshold)?;
    emit(a.out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"), m)
}

fn sweep_cmd(a: &SweepArgs, m: &mut RunManifest) -> Result<()> {
    let plan = plan_decode(&a.decode)?;
    if a.b_values.is_empty() {
        bail!(trace_core::Error::Input("--b-values is empty".into()));
    }
    let scorer = build_scorer(&a.scorer, m)?;
    let l = load_decode(&a.decode, m)?;
    record_streams(m, plan.config.seed);
    let gen = Generator::new(&l.hmm, &l.classifiers, plan.composition, l.source.as_ref())?;
    let shift = a.decode.decode_c.unwrap_or(0.0);
    let rows = sweep(
        &gen,
        &l.prompts,
        &plan.config,
        &a.b_values,
        shift,
        scorer.as_ref(),
        l.source.as_ref(),
    )?;
    let flagged: Vec<Value> = rows
        .iter()
        .filter_map(|r| r.contradiction.map(|s| json!({"b": r.b, "step": s})))
        .collect();
    if !flagged.is_empty() {
        m.extra.insert("contradictions".into(), Value::Array(flagged));
    }
    emit(a.out.as_deref(), &sweep_csv(&rows), m)
}

fn distill(a: &DistillArgs, m: &mut RunManifest) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            m.input(p)?;
            EmConfig::from_json(&std::fs::read_to_string(p)?)?
        }
        None => {
            let Some(h) = a.states else {
                bail!(trace_core::Error::Input("give --config or --states".into()));
            };
            EmConfig::new(h, 0)
        }
    };
    if let Some(h) = a.states {
        cfg.num_states = h;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(d) = a.smoothing {
        cfg.smoothing = d;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    m.config["resolved_em_config"] = serde_json::to_value(&cfg)?;
    m.seed = Some(cfg.seed);
    m.seed_label("em-init", derive_seed(cfg.seed, "em-init"));
    m.seed_label("em-shuffle", derive_seed(cfg.seed, "em-shuffle"));

    m.input(&a.corpus)?;
    let corpus = Corpus::load(a.vocab, &a.corpus)?;
    let holdout = match &a.holdout {
        Some(p) => {
            m.input(p)?;
            Some(Corpus::load(a.vocab, p)?)
        }
        None => None,
    };
    let start = Instant::now();
    let mut epochs = Vec::new();
    let mut failure = None;
    let hmm = em_fit_observed(&corpus, &cfg, None, |r| {
        let mut row = json!({
            "epoch": r.epoch,
            "train_ll_per_token": r.batch_log_likelihood / corpus.num_tokens() as f64,
            "max_param_change": r.max_param_change,
        });
        if let Some(h) = &holdout {
            match per_token_log_likelihood(r.hmm, h) {
                Ok(ll) => row["holdout_ll_per_token"] = json!(ll),
                Err(e) => failure = Some(e),
            }
        }
        epochs.push(row);
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    m.timing("em_seconds", start.elapsed().as_secs_f64());
    m.extra.insert("epochs".into(), Value::Array(epochs));
    hmm.save(&a.out)?;
    m.artifact(&a.out);
    Ok(())
}

fn sample_corpus(a: &SampleCorpusArgs, m: &mut RunManifest) -> Result<()> {
    if a.count == 0 || a.length == 0 {
        bail!(trace_core::Error::Input("--count and --length must be >= 1".into()));
    }
    let hmm = a.hmm.as_ref().map(|p| load_hmm(p, m)).transpose()?;
    let source = build_source(&a.source, hmm.as_ref(), m)?;
    m.seed = Some(a.seed);
    m.seed_label("corpus", derive_seed(a.seed, "corpus"));
    m.seed_label("streams", "derive_seed(seed, \"corpus\") ^ sequence_index");
    let corpus = corpus_from_source(source.as_ref(), a.count, a.length, a.seed)?;
    emit(a.out.as_deref(), &corpus.to_jsonl()?, m)
}

fn fit_classifier(a: &FitClassifierArgs, m: &mut RunManifest) -> Result<()> {
    let transform = match (a.train_b, a.train_c) {
        (None, None) => None,
        (b, c) => Some(LogitTransform::new(b.unwrap_or(1.0), c.unwrap_or(0.0))?),
    };
    let mut cfg = FitConfig::for_vocab(a.vocab);
    cfg.floor = a.floor;
    cfg.max_iterations = a.max_iterations;
    let examples: Vec<TrainingExample> = read_jsonl(&a.examples, m)?;
    let start = Instant::now();
    let outcome = fit(&examples, transform.as_ref(), &cfg)?;
    m.timing("fit_seconds", start.elapsed().as_secs_f64());
    m.extra.insert(
        "fit".into(),
        json!({"loss": outcome.loss, "iterations": outcome.iterations, "converged": outcome.converged}),
    );
    outcome.classifier.save(&a.out)?;
    m.artifact(&a.out);
    Ok(())
}

fn compose(a: &ComposeArgs, m: &mut RunManifest) -> Result<()> {
    let first = load_classifier(&a.first, m)?;
    let second = load_classifier(&a.second, m)?;
    first.compose(&second)?.save(&a.out)?;
    m.artifact(&a.out);
    Ok(())
}

/// Every prefix of length `len` over `v` tokens, lexicographically.
fn all_prefixes(v: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..v).map(move |x| {
                    let mut q = p.clone();
                    q.push(x);
                    q
                })
            })
            .collect();
    }
    out
}

fn oracle_check(a: &OracleCheckArgs, m: &mut RunManifest) -> Result<()> {
    let budget = EnumerationBudget::new(a.budget)?;
    if a.horizon == 0 {
        bail!(trace_core::Error::Input("--horizon must be >= 1".into()));
    }
    m.seed = Some(a.seed);
    let (hmm, cls) = match (&a.random, &a.hmm) {
        (Some(hv), None) => {
            let [h, v] = hv.as_slice() else {
                bail!(trace_core::Error::Input("--random takes H,V".into()));
            };
            let seed = derive_seed(a.seed, "oracle-instance");
            m.seed_label("oracle-instance", seed);
            let mut rng = stream_rng(seed);
            let hmm = Hmm::random(*h, *v, &mut rng)?;
            let cls = FactorizedClassifier::new((0..*v).map(|_| rng.gen::<f64>().ln().max(-20.0)).collect())?;
            (hmm, cls)
        }
        (None, Some(p)) => {
            let hmm = load_hmm(p, m)?;
            let cls = match &a.classifier {
                Some(c) => load_classifier(c, m)?,
                None => FactorizedClassifier::neutral(hmm.vocab_size()),
            };
            (hmm, cls)
        }
        _ => bail!(trace_core::Error::Input("give exactly one of --hmm or --random".into())),
    };
    let source = build_source(&a.source, Some(&hmm), m)?;
    let (v, n) = (hmm.vocab_size(), a.horizon);
    let cache = BackwardCache::build(&hmm, &cls, n)?;
    let gen = Generator::new(&hmm, std::slice::from_ref(&cls), CompositionMode::Composite, source.as_ref())?;
    let exact = GenerationConfig::default();

    let mut eap_dev: f64 = 0.0;
    let mut cond_dev: f64 = 0.0;
    let mut prefixes = 0usize;
    for t in 1..=n {
        for prefix in all_prefixes(v, t - 1) {
            let state = hmm.forward_prefix(&prefix)?;
            if state.as_ref().is_some_and(|s| s.log_evidence() == f64::NEG_INFINITY) {
                continue;
            }
            prefixes += 1;
            let dp = cache.eap_scores(&hmm, &cls, state.as_ref(), t)?;
            let bf = bf_eap(&hmm, &cls, &prefix, t, n, budget)?;
            eap_dev = dp.iter().zip(&bf).map(|(x, y)| (x - y).abs()).fold(eap_dev, f64::max);
            let q = match gen.distribution_after(&prefix, n, &exact) {
                Ok(d) => d.q,
                Err(trace_core::Error::Contradiction { .. }) => vec![0.0; v],
                Err(e) => return Err(e.into()),
            };
            let bc = bf_conditional(source.as_ref(), &cls, &prefix, t, n, budget)?;
            cond_dev = q.iter().zip(&bc).map(|(x, y)| (x - y).abs()).fold(cond_dev, f64::max);
        }
    }
    let mut ll_dev: f64 = 0.0;
    let mut rng = stream_rng(derive_seed(a.seed, "oracle-sequences"));
    for _ in 0..16 {
        let seq = hmm.sample_sequence(n, &mut rng);
        let bf = bf_sequence_prob(&hmm, &seq, budget)?;
        ll_dev = ll_dev.max((hmm.log_likelihood(&seq)?.exp() - bf).abs());
    }
    let report = json!({
        "h": hmm.num_states(),
        "v": v,
        "horizon": n,
        "prefixes_checked": prefixes,
        "max_eap_deviation": eap_dev,
        "max_conditional_deviation": cond_dev,
        "max_likelihood_deviation": ll_dev,
        "tolerance": a.tolerance,
        "within_tolerance": eap_dev <= a.tolerance && cond_dev <= a.tolerance && ll_dev <= a.tolerance,
    });
    m.extra.insert("report".into(), report.clone());
    emit(a.out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"), m)
}

fn bench_cmd(a: &BenchArgs, m: &mut RunManifest) -> Result<()> {
    if a.hs.is_empty() || a.vs.is_empty() || a.ns.is_empty() || a.reps == 0 {
        bail!(trace_core::Error::Input("bench grids and --reps must be nonempty".into()));
    }
    let cfg = BenchConfig {
        reps: a.reps,
        min_rep_time: Duration::from_millis(a.min_rep_ms),
        seed: a.seed,
    };
    m.seed = Some(a.seed);
    let rows = bench::run_grid(&a.hs, &a.vs, &a.ns, &cfg)?;
    let mut table = bench::timing_csv(&rows);
    if a.source.source != "hmm" {
        let (hmm, cls) = match &a.hmm {
            Some(p) => {
                let hmm = load_hmm(p, m)?;
                let cls = match &a.classifier {
                    Some(c) => load_classifier(c, m)?,
                    None => FactorizedClassifier::neutral(hmm.vocab_size()),
                };
                (hmm, cls)
            }
            None => {
                let Some(v) = a.source.vocab else {
                    bail!(trace_core::Error::Input("overhead timing needs --hmm or --vocab".into()));
                };
                let h = *a.hs.last().expect("nonempty");
                let hmm = Hmm::random(h, v, &mut stream_rng(derive_seed(a.seed, "bench-overhead")))?;
                (hmm, FactorizedClassifier::neutral(v))
            }
        };
        let source = build_source(&a.source, Some(&hmm), m)?;
        let o = bench::guided_overhead(source.as_ref(), &hmm, &cls, &cfg)?;
        let (h, v) = (hmm.num_states(), hmm.vocab_size());
        table.push_str(&format!("source_query,{h},{v},1,{:.6e}\n", o.source_seconds));
        table.push_str(&format!("eap_step,{h},{v},1,{:.6e}\n", o.eap_seconds));
        eprintln!("guided / unguided per-step time ratio: {:.3}", o.ratio);
        m.extra.insert("overhead".into(), serde_json::to_value(&o)?);
    }
    emit(a.out.as_deref(), &table, m)
}
