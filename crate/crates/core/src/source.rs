//! Base next-token distributions `p_lm(x_t | x_<t)`.
//!
//! Every source answers `query(prefix)` with a length-V probability vector.
//! Sources must be pure (same prefix, same answer) and shareable across
//! generation threads.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{ForwardState, Hmm};

/// Maximum deviation of a source's total mass from one.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

/// Remote responses whose mass drifts more than this are rejected rather
/// than renormalized.
pub const REMOTE_DRIFT_TOLERANCE: f64 = 1e-4;

/// HTTP path of the next-token endpoint.
pub const HTTP_PATH: &str = "/v1/next_token_logprobs";

pub trait NextTokenSource: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn query(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<S: NextTokenSource + ?Sized> NextTokenSource for &S {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn query(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        (**self).query(prefix)
    }
}

impl<S: NextTokenSource + ?Sized> NextTokenSource for Box<S> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn query(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        (**self).query(prefix)
    }
}

impl<S: NextTokenSource + ?Sized> NextTokenSource for Arc<S> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn query(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        (**self).query(prefix)
    }
}

/// Checks the source contract: length V, entries finite and nonnegative,
/// total within [`DISTRIBUTION_TOLERANCE`] of one.
pub fn validate_distribution(vocab_size: usize, probs: &[f64]) -> Result<()> {
    if probs.len() != vocab_size {
        return Err(Error::Input(format!(
            "distribution has {} entries, expected {vocab_size}",
            probs.len()
        )));
    }
    if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !(p.is_finite() && **p >= 0.0)) {
        return Err(Error::Input(format!("distribution entry {i} is {p}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::Input(format!("distribution sums to {total}")));
    }
    Ok(())
}

/// Queries a source and validates its answer.
pub fn checked_query(source: &dyn NextTokenSource, prefix: &[usize]) -> Result<Vec<f64>> {
    let probs = source.query(prefix)?;
    validate_distribution(source.vocab_size(), &probs)?;
    Ok(probs)
}

/// Wrapper that validates every answer of the inner source.
#[derive(Debug, Clone)]
pub struct Validated<S>(pub S);

impl<S: NextTokenSource> NextTokenSource for Validated<S> {
    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }

    fn query(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        checked_query(&self.0, prefix)
    }
}

const HMM_STATE_CACHE_LIMIT: usize = 1 << 16;

/// Uses an HMM's own predictive distribution as the language model.
///
/// Forward states are memoized per prefix. A state is always reached by the
/// same chain of forward updates, so cached and fresh answers are identical.
#[derive(Debug)]
pub struct HmmSource {
    hmm: Arc<Hmm>,
    states: Mutex<HashMap<Vec<usize>, ForwardState>>,
}

impl HmmSource {
    pub fn new(hmm: Arc<Hmm>) -> Self {
        Self {
            hmm,
            states: Mutex::new(HashMap::new()),
        }
    }

    pub fn hmm(&self) -> &Hmm {
        &self.hmm
    }

    fn state_for(&self, prefix: &[usize]) -> Result<Option<ForwardState>> {
        if prefix.is_empty() {
            return Ok(None);
        }
        let (mut known, mut state) = {
            let states = self.states.lock().expect("state cache poisoned");
            (1..=prefix.len())
                .rev()
                .find_map(|k| states.get(&prefix[..k]).map(|s| (k, Some(s.clone()))))
                .unwrap_or((0, None))
        };
        let mut fresh = Vec::new();
        while known < prefix.len() {
            let tok = prefix[known];
            let next = match &state {
                None => self.hmm.forward_init(tok)?,
                Some(s) => self.hmm.forward_update(s, tok)?,
            };
            known += 1;
            fresh.push((prefix[..known].to_vec(), next.clone()));
            state = Some(next);
        }
        if !fresh.is_empty() {
            let mut states = self.states.lock().expect("state cache poisoned");
            if states.len() + fresh.len() > HMM_STATE_CACHE_LIMIT {
                states.clear();
            }
            states.extend(fresh);
        }
        Ok(state)
    }
}

impl NextTokenSource for HmmSource {
    fn vocab_size(&self) -> usize {
        self.hmm.vocab_size()
    }

    fn query(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let state = self.state_for(prefix)?;
        self.hmm.next_token_dist(state.as_ref())
    }
}

pub fn hmm_source(hmm: Arc<Hmm>) -> Validated<HmmSource> {
    Validated(HmmSource::new(hmm))
}

/// Explicit conditional tables keyed by prefix.
#[derive(Debug, Clone)]
pub struct TableSource {
    vocab_size: usize,
    rows: HashMap<Vec<usize>, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    v: usize,
    entries: Vec<TableEntry>,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    prefix: Vec<usize>,
    probs: Vec<f64>,
}

impl TableSource {
    /// Every row is audited against the source contract.
    pub fn new(vocab_size: usize, rows: HashMap<Vec<usize>, Vec<f64>>) -> Result<Self> {
        for (prefix, probs) in &rows {
            validate_distribution(vocab_size, probs)
                .map_err(|e| Error::Input(format!("table row for prefix {prefix:?}: {e}")))?;
            if prefix.iter().any(|&t| t >= vocab_size) {
                return Err(Error::Input(format!("table prefix {prefix:?} has out-of-range ids")));
            }
        }
        Ok(Self { vocab_size, rows })
    }

    /// Tabulates `f(prefix)` for every prefix of length `0..horizon`.
    pub fn from_fn<F>(vocab_size: usize, horizon: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(&[usize]) -> Vec<f64>,
    {
        let mut rows = HashMap::new();
        let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
        for depth in 0..horizon {
            let mut next = Vec::new();
            for prefix in frontier {
                rows.insert(prefix.clone(), f(&prefix));
                if depth + 1 < horizon {
                    for v in 0..vocab_size {
                        let mut child = prefix.clone();
                        child.push(v);
                        next.push(child);
                    }
                }
            }
            frontier = next;
        }
        Self::new(vocab_size, rows)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&Vec<usize>, &Vec<f64>)> {
        self.rows.iter()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TableFile = serde_json::from_str(text)?;
        let rows = file.entries.into_iter().map(|e| (e.prefix, e.probs)).collect();
        Self::new(file.v, rows)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut entries: Vec<TableEntry> = self
            .rows
            .iter()
            .map(|(p, r)| TableEntry {
                prefix: p.clone(),
                probs: r.clone(),
            })
            .collect();
        entries.sort_by(|a, b| a.prefix.len().cmp(&b.prefix.len()).then(a.prefix.cmp(&b.prefix)));
        Ok(serde_json::to_string(&TableFile {
            v: self.vocab_size,
            entries,
        })?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl NextTokenSource for TableSource {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn query(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.rows
            .get(prefix)
            .cloned()
            .ok_or_else(|| Error::Coverage(prefix.to_vec()))
    }
}

pub fn table_source(table: TableSource) -> Validated<TableSource> {
    Validated(table)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// Base URL of an HTTP server; [`HTTP_PATH`] is appended unless present.
    Http(String),
    /// Shell command of a child process speaking newline-delimited JSON.
    Stdio(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteSourceConfig {
    pub endpoint: Endpoint,
    pub timeout_ms: u64,
    pub vocab_size: usize,
}

#[derive(Serialize, Deserialize)]
pub struct WireRequest {
    pub prefix: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
pub struct WireResponse {
    pub logprobs: Vec<Option<f64>>,
}

/// Turns a wire response into a probability vector, renormalizing small
/// transport drift.
pub fn decode_logprobs(vocab_size: usize, body: &str) -> Result<Vec<f64>> {
    let resp: WireResponse =
        serde_json::from_str(body).map_err(|e| Error::Remote(format!("malformed payload: {e}")))?;
    if resp.logprobs.len() != vocab_size {
        return Err(Error::Remote(format!(
            "size mismatch: got {} logprobs, expected {vocab_size}",
            resp.logprobs.len()
        )));
    }
    let mut probs = Vec::with_capacity(vocab_size);
    for (i, lp) in resp.logprobs.iter().enumerate() {
        match lp {
            Some(x) if !x.is_nan() && *x != f64::INFINITY => probs.push(x.exp()),
            _ => return Err(Error::Remote(format!("non-finite logprob at index {i}"))),
        }
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > REMOTE_DRIFT_TOLERANCE {
        return Err(Error::Remote(format!("probability mass {total} drifts beyond tolerance")));
    }
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(probs)
}

struct StdioChild {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Drop for StdioChild {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

enum Transport {
    Http { agent: ureq::Agent, url: String },
    Stdio(Mutex<StdioChild>),
}

/// Client for an external model server.
pub struct RemoteSource {
    config: RemoteSourceConfig,
    transport: Transport,
}

impl std::fmt::Debug for RemoteSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteSource").field("config", &self.config).finish()
    }
}

impl RemoteSource {
    pub fn connect(config: RemoteSourceConfig) -> Result<Self> {
        if config.timeout_ms == 0 {
            return Err(Error::Input("remote timeout must be > 0 ms".into()));
        }
        let timeout = Duration::from_millis(config.timeout_ms);
        let transport = match &config.endpoint {
            Endpoint::Http(base) => {
                let url = if base.ends_with(HTTP_PATH) {
                    base.clone()
                } else {
                    format!("{}{HTTP_PATH}", base.trim_end_matches('/'))
                };
                Transport::Http {
                    agent: ureq::AgentBuilder::new().timeout(timeout).build(),
                    url,
                }
            }
            Endpoint::Stdio(cmd) => {
                let mut child = Command::new("sh")
                    .arg("-c")
                    .arg(cmd)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()?;
                let stdin = child.stdin.take().expect("stdin is piped");
                let stdout = child.stdout.take().expect("stdout is piped");
                let (tx, rx) = mpsc::channel();
                std::thread::spawn(move || {
                    for line in BufReader::new(stdout).lines() {
                        if tx.send(line).is_err() {
                            break;
                        }
                    }
                });
                Transport::Stdio(Mutex::new(StdioChild {
                    child,
                    stdin,
                    lines: rx,
                }))
            }
        };
        Ok(Self { config, transport })
    }

    pub fn config(&self) -> &RemoteSourceConfig {
        &self.config
    }

    fn round_trip(&self, request: &str) -> Result<String> {
        let timeout = Duration::from_millis(self.config.timeout_ms);
        match &self.transport {
            Transport::Http { agent, url } => agent
                .post(url)
                .set("Content-Type", "application/json")
                .send_string(request)
                .map_err(|e| Error::Remote(e.to_string()))?
                .into_string()
                .map_err(|e| Error::Remote(e.to_string())),
            Transport::Stdio(child) => {
                let mut child = child.lock().expect("stdio child poisoned");
                writeln!(child.stdin, "{request}")
                    .and_then(|_| child.stdin.flush())
                    .map_err(|e| Error::Remote(format!("write to child failed: {e}")))?;
                match child.lines.recv_timeout(timeout) {
                    Ok(Ok(line)) => Ok(line),
                    Ok(Err(e)) => Err(Error::Remote(format!("read from child failed: {e}"))),
                    Err(RecvTimeoutError::Timeout) => Err(Error::Remote(format!(
                        "timeout after {} ms",
                        self.config.timeout_ms
                    ))),
                    Err(RecvTimeoutError::Disconnected) => {
                        Err(Error::Remote("child process closed its output".into()))
                    }
                }
            }
        }
    }
}

impl NextTokenSource for RemoteSource {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn query(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let request = serde_json::to_string(&WireRequest {
            prefix: prefix.to_vec(),
        })?;
        let body = self.round_trip(&request)?;
        decode_logprobs(self.config.vocab_size, &body)
    }
}

pub fn remote_source(config: RemoteSourceConfig) -> Result<Validated<RemoteSource>> {
    Ok(Validated(RemoteSource::connect(config)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::test_models::{seeded, single_state};
    use crate::sampling::stream_rng;
    use rand::Rng;

    #[test]
    fn single_state_hmm_source_returns_emission_row() {
        let src = hmm_source(Arc::new(single_state(&[0.2, 0.3, 0.5])));
        for prefix in [vec![], vec![0], vec![2, 1, 1]] {
            let d = src.query(&prefix).unwrap();
            for (a, b) in d.iter().zip([0.2, 0.3, 0.5]) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hmm_source_is_pure_with_or_without_cache() {
        let hmm = Arc::new(seeded(12, 3, 4));
        let warm = HmmSource::new(hmm.clone());
        let prefix = [3, 1, 0, 2, 2];
        for k in 0..prefix.len() {
            warm.query(&prefix[..k]).unwrap();
        }
        let a = warm.query(&prefix).unwrap();
        let b = warm.query(&prefix).unwrap();
        let cold = HmmSource::new(hmm).query(&prefix).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, cold);
    }

    #[test]
    fn table_source_cases() {
        let uniform = TableSource::from_fn(4, 3, |_| vec![0.25; 4]).unwrap();
        assert_eq!(uniform.query(&[1, 2]).unwrap(), vec![0.25; 4]);
        assert!(matches!(uniform.query(&[1, 2, 3]), Err(Error::Coverage(_))));

        let forcing = TableSource::from_fn(3, 2, |_| vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(forcing.query(&[]).unwrap(), vec![0.0, 1.0, 0.0]);

        let mut rng = stream_rng(4);
        let random = TableSource::from_fn(5, 4, |_| {
            let raw: Vec<f64> = (0..5).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|x| x / s).collect()
        })
        .unwrap();
        for (_, row) in random.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let back = TableSource::from_json(&random.to_json().unwrap()).unwrap();
        assert_eq!(back.query(&[4, 0, 1]).unwrap(), random.query(&[4, 0, 1]).unwrap());

        let mut bad = HashMap::new();
        bad.insert(vec![], vec![0.5, 0.6]);
        assert!(TableSource::new(2, bad).is_err());
    }

    #[test]
    fn validator_rejects_bad_distributions() {
        assert!(validate_distribution(2, &[0.5, 0.5]).is_ok());
        assert!(validate_distribution(3, &[0.5, 0.5]).is_err());
        assert!(validate_distribution(2, &[1.5, -0.5]).is_err());
        assert!(validate_distribution(2, &[0.5, 0.4]).is_err());
        assert!(validate_distribution(2, &[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn logprob_decoding() {
        let uniform = format!(r#"{{"logprobs":[{x},{x},{x},{x}]}}"#, x = 0.25f64.ln());
        assert_eq!(decode_logprobs(4, &uniform).unwrap(), vec![0.25; 4]);
        assert!(matches!(decode_logprobs(5, &uniform), Err(Error::Remote(_))));
        assert!(decode_logprobs(2, r#"{"logprobs":[0.0,null]}"#).is_err());
        assert!(decode_logprobs(2, r#"{"probs":[0.5,0.5]}"#).is_err());
        assert!(decode_logprobs(2, "[not json").is_err());
        let drift = format!(r#"{{"logprobs":[{},{}]}}"#, 0.6f64.ln(), 0.6f64.ln());
        assert!(decode_logprobs(2, &drift).is_err());

        let mut rng = stream_rng(31);
        let raw: Vec<f64> = (0..7).map(|_| rng.gen::<f64>() + 0.01).collect();
        let s: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let body = serde_json::to_string(&WireResponse {
            logprobs: probs.iter().map(|p| Some(p.ln())).collect(),
        })
        .unwrap();
        let back = decode_logprobs(7, &body).unwrap();
        for (a, b) in back.iter().zip(&probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stdio_echo_server() {
        let line = format!(r#"{{"logprobs":[{x},{x},{x}]}}"#, x = (1.0f64 / 3.0).ln());
        let cmd = format!("while read -r l; do echo '{line}'; done");
        let src = remote_source(RemoteSourceConfig {
            endpoint: Endpoint::Stdio(cmd),
            timeout_ms: 5_000,
            vocab_size: 3,
        })
        .unwrap();
        for prefix in [vec![], vec![1, 2]] {
            let d = src.query(&prefix).unwrap();
            for p in d {
                assert!((p - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stdio_timeout_and_zero_timeout() {
        let src = remote_source(RemoteSourceConfig {
            endpoint: Endpoint::Stdio("sleep 5".into()),
            timeout_ms: 50,
            vocab_size: 3,
        })
        .unwrap();
        match src.query(&[]) {
            Err(Error::Remote(msg)) => assert!(msg.contains("timeout") || msg.contains("closed")),
            other => panic!("expected remote error, got {other:?}"),
        }
        assert!(RemoteSource::connect(RemoteSourceConfig {
            endpoint: Endpoint::Stdio("cat".into()),
            timeout_ms: 0,
            vocab_size: 3,
        })
        .is_err());
    }
}
