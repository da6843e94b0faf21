use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use trace_core::sampling::stream_rng;
use trace_core::{FactorizedClassifier, Hmm};

fn trace(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trace"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = trace(dir, args);
    assert!(
        out.status.success(),
        "trace {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn error_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().expect("stderr line")).expect("error JSON")
}

/// Model, two classifiers, their neutral counterpart and a prompt file.
fn fixture() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| -> PathBuf { dir.path().join(name) };
    let hmm = Hmm::random(3, 5, &mut stream_rng(17)).unwrap();
    hmm.save(&p("model.json")).unwrap();
    FactorizedClassifier::new(vec![0.0, -1.0, -0.3, 0.0, -2.0]).unwrap().save(&p("a.json")).unwrap();
    FactorizedClassifier::new(vec![-0.5, 0.0, -0.1, -1.2, 0.0]).unwrap().save(&p("b.json")).unwrap();
    FactorizedClassifier::neutral(5).save(&p("ones.json")).unwrap();
    std::fs::write(p("prompts.jsonl"), "[0, 1]\n[4]\n[2, 2, 3]\n").unwrap();
    dir
}

const GEN: &[&str] = &["generate", "--hmm", "model.json", "--prompt-file", "prompts.jsonl", "--new-tokens", "6", "--k", "4", "--seed", "5"];

fn generate(dir: &Path, extra: &[&str], out: &str) -> Vec<u8> {
    let mut args = GEN.to_vec();
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out", out]);
    ok(dir, &args);
    std::fs::read(dir.join(out)).unwrap()
}

#[test]
fn neutral_classifier_reproduces_unguided_output() {
    let dir = fixture();
    let d = dir.path();
    let plain = generate(d, &[], "plain.jsonl");
    let ones = generate(d, &["--classifier", "ones.json"], "ones.jsonl");
    assert!(!plain.is_empty());
    assert_eq!(plain, ones);
    assert_eq!(String::from_utf8(plain).unwrap().lines().count(), 12);
}

#[test]
fn precomposed_classifier_matches_repeated_flags() {
    let dir = fixture();
    let d = dir.path();
    ok(d, &["compose", "a.json", "b.json", "--out", "ab.json"]);
    let pre = generate(d, &["--classifier", "ab.json"], "pre.jsonl");
    let both = generate(d, &["--classifier", "a.json", "--classifier", "b.json"], "both.jsonl");
    assert_eq!(pre, both);
    let product = generate(
        d,
        &["--classifier", "a.json", "--classifier", "b.json", "--composition", "eap_product"],
        "product.jsonl",
    );
    assert_eq!(String::from_utf8(product).unwrap().lines().count(), 12);
}

#[test]
fn oracle_check_on_a_random_triple() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["oracle-check", "--random", "2,3", "--horizon", "5", "--seed", "3"]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["within_tolerance"], Value::Bool(true));
    assert!(report["max_eap_deviation"].as_f64().unwrap() <= 1e-9);
    assert!(report["max_conditional_deviation"].as_f64().unwrap() <= 1e-9);
    assert!(report["prefixes_checked"].as_u64().unwrap() > 0);
}

#[test]
fn oracle_check_respects_the_budget() {
    let dir = tempfile::tempdir().unwrap();
    let out = trace(dir.path(), &["oracle-check", "--random", "2,3", "--horizon", "6", "--budget", "10"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "budget");
}

#[test]
fn errors_are_machine_readable() {
    let dir = fixture();
    let d = dir.path();

    let out = trace(d, &["generate", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "usage");

    let out = trace(d, &["generate", "--hmm", "missing.json", "--prompt-file", "prompts.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_json(&out);
    assert_eq!(e["error"], "io");
    assert!(e["message"].as_str().unwrap().contains("missing.json"));

    FactorizedClassifier::neutral(4).save(&d.join("small.json")).unwrap();
    let mut args = GEN.to_vec();
    args.extend_from_slice(&["--classifier", "small.json"]);
    let out = trace(d, &args);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "config");

    let mut args = GEN.to_vec();
    args.extend_from_slice(&["--top-p", "0"]);
    let out = trace(d, &args);
    assert_eq!(out.status.code(), Some(1));
    assert!(!d.join("trace-generate.manifest.json").exists());
}

#[test]
fn every_run_writes_a_manifest() {
    let dir = fixture();
    let d = dir.path();
    generate(d, &["--classifier", "a.json"], "s.jsonl");
    let m: Value = serde_json::from_slice(&std::fs::read(d.join("s.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "generate");
    let inputs = m["inputs"].as_array().unwrap();
    assert!(inputs.iter().any(|i| i["path"] == "model.json" && i["sha256"].as_str().unwrap().len() == 64));
    assert!(m["artifacts"].as_array().unwrap().iter().any(|a| a == "s.jsonl"));
    assert!(m["timings"]["total_seconds"].as_f64().unwrap() >= 0.0);

    ok(d, &["--manifest", "custom.json", "compose", "a.json", "b.json", "--out", "ab.json"]);
    assert!(d.join("custom.json").exists());
}

#[test]
fn corpus_distill_fit_pipeline() {
    let dir = fixture();
    let d = dir.path();
    let args = ["sample-corpus", "--hmm", "model.json", "--count", "200", "--length", "6", "--seed", "2"];
    let a = ok(d, &args).stdout;
    assert_eq!(a, ok(d, &args).stdout);
    std::fs::write(d.join("corpus.jsonl"), &a).unwrap();
    ok(
        d,
        &["distill", "--corpus", "corpus.jsonl", "--vocab", "5", "--states", "3", "--epochs", "3", "--batch-size", "64", "--out", "fit.json"],
    );
    Hmm::load(&d.join("fit.json")).unwrap();

    let cls = FactorizedClassifier::load(&d.join("a.json")).unwrap();
    let examples: String = String::from_utf8(a)
        .unwrap()
        .lines()
        .take(100)
        .map(|l| {
            let tokens: Vec<usize> = serde_json::from_str(l).unwrap();
            let p = cls.score_log(&tokens).unwrap().exp();
            format!("{{\"tokens\": {l}, \"oracle_prob\": {p}}}\n")
        })
        .collect();
    std::fs::write(d.join("examples.jsonl"), examples).unwrap();
    ok(d, &["fit-classifier", "--examples", "examples.jsonl", "--vocab", "5", "--out", "fitted.json"]);
    let fitted = FactorizedClassifier::load(&d.join("fitted.json")).unwrap();
    for (x, y) in fitted.log_weights().iter().zip(cls.log_weights()) {
        assert!((x - y).abs() < 1e-4, "{x} vs {y}");
    }
}

#[test]
fn eval_and_sweep_outputs() {
    let dir = fixture();
    let d = dir.path();
    generate(d, &["--classifier", "a.json"], "s.jsonl");
    let out = ok(d, &["eval", "--samples", "s.jsonl", "--hmm", "model.json", "--scorer-classifier", "a.json"]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["avg_max", "dist2", "dist3", "ppl"] {
        assert!(report[key].is_number(), "{key} missing in {report}");
    }
    let mut args = vec!["sweep"];
    args.extend_from_slice(&GEN[1..]);
    args.extend_from_slice(&["--classifier", "a.json", "--scorer-classifier", "a.json", "--b-values", "0.5,2"]);
    let csv = String::from_utf8(ok(d, &args).stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "b,avg_max,any_prob,dist2,dist3,ppl,entropy");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0.5,"));
}

#[test]
fn bench_emits_a_timing_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["bench", "--hs", "2,4", "--vs", "3", "--ns", "2", "--reps", "1", "--min-rep-ms", "1"]);
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("op,h,v,n,seconds\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
}
