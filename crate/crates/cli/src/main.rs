//! `trace`: distill HMMs, fit and compose classifiers, generate under
//! control, evaluate, sweep, check exactness and benchmark.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "trace", version, about = "HMM-guided controllable generation")]
struct Cli {
    /// Where to write the run manifest (default: `<out>.manifest.json`).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Fit an HMM to a JSONL corpus by mini-batch EM.
    Distill(DistillArgs),
    /// Sample a JSONL corpus from a next-token source.
    SampleCorpus(SampleCorpusArgs),
    /// Fit a factorized classifier to scored sequences.
    FitClassifier(FitClassifierArgs),
    /// Multiply the token weights of two classifiers.
    Compose(ComposeArgs),
    /// Sample guided continuations.
    Generate(GenerateArgs),
    /// Attribute, diversity and fluency metrics of generated samples.
    Eval(EvalArgs),
    /// Metrics across decode-time transform scales.
    Sweep(SweepArgs),
    /// Compare the dynamic programs against brute-force enumeration.
    OracleCheck(OracleCheckArgs),
    /// Time EAP scoring, forward updates and cache builds.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct SourceArgs {
    /// Base next-token source: hmm, table, remote:URL or stdio:CMD.
    #[arg(long, default_value = "hmm")]
    source: String,
    /// Model used as the base LM when `--source hmm` (default: `--hmm`).
    #[arg(long)]
    source_hmm: Option<PathBuf>,
    /// Conditional table file for `--source table`.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Vocabulary size of a remote source (default: the model's).
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long, default_value_t = 10_000)]
    timeout_ms: u64,
}

#[derive(Args, Debug, Clone, Serialize)]
struct DecodeArgs {
    #[arg(long)]
    hmm: PathBuf,
    /// Classifier file; repeat to compose several.
    #[arg(long)]
    classifier: Vec<PathBuf>,
    #[command(flatten)]
    source: SourceArgs,
    /// JSONL file, one prompt (array of token ids) per line.
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    new_tokens: usize,
    #[arg(long, default_value_t = 0.9)]
    top_p: f64,
    /// Samples per prompt.
    #[arg(long, default_value_t = 25)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Decode-time logit scale applied to the EAP.
    #[arg(long)]
    decode_b: Option<f64>,
    /// Decode-time logit shift applied to the EAP.
    #[arg(long)]
    decode_c: Option<f64>,
    #[arg(long, default_value = "post")]
    nucleus_stage: String,
    /// composite (weight product) or eap_product.
    #[arg(long, default_value = "composite")]
    composition: String,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ScorerArgs {
    /// Score violations as `1 - prod w(x)` under this classifier.
    #[arg(long)]
    scorer_classifier: Option<PathBuf>,
    /// Score violations with a count scorer ({"bad", "scale", "offset"}).
    #[arg(long)]
    scorer_count: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args, Debug, Serialize)]
struct DistillArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: usize,
    /// EM configuration JSON; flags below fill in when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    smoothing: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Held-out corpus scored after every epoch.
    #[arg(long)]
    holdout: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SampleCorpusArgs {
    #[arg(long)]
    hmm: Option<PathBuf>,
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct FitClassifierArgs {
    /// JSONL of {"tokens": [...], "oracle_prob": p}.
    #[arg(long)]
    examples: PathBuf,
    #[arg(long)]
    vocab: usize,
    /// Training-time logit scale applied to oracle scores.
    #[arg(long)]
    train_b: Option<f64>,
    #[arg(long)]
    train_c: Option<f64>,
    #[arg(long, default_value_t = trace_core::classifier::DEFAULT_LOG_WEIGHT_FLOOR)]
    floor: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iterations: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ComposeArgs {
    first: PathBuf,
    second: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct GenerateArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// Samples JSONL written by `generate`.
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    hmm: Option<PathBuf>,
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    scorer: ScorerArgs,
    /// Group size; by default consecutive samples sharing a prompt form a group.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    #[command(flatten)]
    scorer: ScorerArgs,
    /// Comma-separated decode scales.
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4,8")]
    b_values: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct OracleCheckArgs {
    #[arg(long)]
    hmm: Option<PathBuf>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Build a seeded random model triple instead: `H,V`.
    #[arg(long, value_delimiter = ',')]
    random: Option<Vec<usize>>,
    #[command(flatten)]
    source: SourceArgs,
    /// Sequence length n.
    #[arg(long, default_value_t = 5)]
    horizon: usize,
    #[arg(long, default_value_t = 1_000_000)]
    budget: u128,
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "32,64,128,256")]
    hs: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "64")]
    vs: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    ns: Vec<usize>,
    #[arg(long, default_value_t = 7)]
    reps: usize,
    #[arg(long, default_value_t = 20)]
    min_rep_ms: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also time this source against one EAP step (any source but hmm).
    #[arg(long)]
    hmm: Option<PathBuf>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    if let Some(e) = err.downcast_ref::<trace_core::Error>() {
        return e.kind();
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    if err.downcast_ref::<serde_json::Error>().is_some() {
        return "json";
    }
    "input"
}

fn report(kind: &str, message: &str) {
    let body = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{body}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            report("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(error_kind(&e), &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}
