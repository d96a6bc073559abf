//! Metric scorers behind one trait: native pairwise metrics and
//! out-of-process scorers reached over the line protocol.
//!
//! Protocol, one JSON object per line in each direction:
//!
//! ```text
//! -> {"id": "...", "candidate": "...", "references": ["...", ...]}
//! <- {"id": "...", "score": 0.42}
//! ```
//!
//! Transports: a subprocess fed on stdin and read from stdout (one process
//! per batch), or `POST` of the request lines to an HTTP `/score` URL.

use super::rouge::{rouge_l_text, score_candidate, unigram_f1, MultiRefPolicy};
use crate::registry::Registry;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::Duration;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreItem {
    pub id: String,
    pub candidate: String,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Clinical,
    Lexical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transport {
    /// Native pairwise metric looked up by name.
    Builtin {
        name: String,
    },
    /// `command[0]` may be `@self`, meaning the running executable.
    Subprocess {
        command: Vec<String>,
    },
    Http {
        url: String,
    },
}

fn default_batch_size() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerSpec {
    pub metric: String,
    pub transport: Transport,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub kind: MetricKind,
}

/// Fixed classification of the metrics the harness knows by name.
pub fn known_metric_kind(metric: &str) -> Option<MetricKind> {
    match metric {
        "radgraph_xl" | "ratescore" => Some(MetricKind::Clinical),
        "rouge_l" | "bertscore" => Some(MetricKind::Lexical),
        _ => None,
    }
}

impl ScorerSpec {
    pub fn validate(&self) -> Result<(), ScorerError> {
        if let Some(k) = known_metric_kind(&self.metric) {
            if k != self.kind {
                return Err(ScorerError::InvalidSpec(format!(
                    "{} must be classified {:?}, not {:?}",
                    self.metric, k, self.kind
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(ScorerError::InvalidSpec(format!(
                "{}: batch_size must be positive",
                self.metric
            )));
        }
        if let Transport::Subprocess { command } = &self.transport {
            if command.is_empty() {
                return Err(ScorerError::InvalidSpec(format!(
                    "{}: empty command",
                    self.metric
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BatchFailure {
    #[error("malformed response line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("response id {0:?} was not requested")]
    UnknownId(String),
    #[error("response id {0:?} answered twice")]
    DuplicateId(String),
    #[error("no response for ids {0:?}")]
    Missing(Vec<String>),
    #[error("scorer exited abnormally: {0}")]
    Crashed(String),
    #[error("transport: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScorerError {
    /// Scores already received stay in `partial`, aligned with the request.
    #[error("scorer {metric} failed: {failure}")]
    Batch {
        metric: String,
        partial: Vec<Option<f64>>,
        failure: BatchFailure,
    },
    #[error("invalid scorer spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Unknown(#[from] crate::registry::UnknownEntry),
}

pub trait Scorer: Send + Sync {
    fn metric(&self) -> &str;
    fn kind(&self) -> MetricKind;
    /// One score per item, in item order.
    fn score_batch(&self, items: &[ScoreItem]) -> Result<Vec<f64>, ScorerError>;
}

/// A candidate-versus-single-reference metric.
pub trait PairMetric: Send + Sync {
    fn score(&self, candidate: &str, reference: &str) -> f64;
}

struct FnMetric(fn(&str, &str) -> f64);

impl PairMetric for FnMetric {
    fn score(&self, candidate: &str, reference: &str) -> f64 {
        (self.0)(candidate, reference)
    }
}

pub type PairMetricRegistry = Registry<dyn PairMetric>;

/// `rouge_l` and the test-only `unigram_f1`.
pub fn builtin_pair_metrics() -> PairMetricRegistry {
    let mut reg: PairMetricRegistry = Registry::new("builtin metric");
    reg.register("rouge_l", Arc::new(FnMetric(rouge_l_text)));
    reg.register("unigram_f1", Arc::new(FnMetric(unigram_f1)));
    reg
}

pub struct BuiltinScorer {
    metric: String,
    kind: MetricKind,
    pair: Arc<dyn PairMetric>,
    policy: MultiRefPolicy,
}

impl Scorer for BuiltinScorer {
    fn metric(&self) -> &str {
        &self.metric
    }

    fn kind(&self) -> MetricKind {
        self.kind
    }

    fn score_batch(&self, items: &[ScoreItem]) -> Result<Vec<f64>, ScorerError> {
        items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                let refs: Vec<&str> = it.references.iter().map(String::as_str).collect();
                score_candidate(
                    &it.candidate,
                    &refs,
                    |c, r| self.pair.score(c, r),
                    self.policy,
                )
                .map_err(|_| ScorerError::Batch {
                    metric: self.metric.clone(),
                    partial: vec![None; items.len()],
                    failure: BatchFailure::Missing(vec![items[i].id.clone()]),
                })
            })
            .collect()
    }
}

pub struct ExternalScorer {
    spec: ScorerSpec,
}

impl ExternalScorer {
    pub fn new(spec: ScorerSpec) -> Self {
        Self { spec }
    }
}

impl Scorer for ExternalScorer {
    fn metric(&self) -> &str {
        &self.spec.metric
    }

    fn kind(&self) -> MetricKind {
        self.spec.kind
    }

    fn score_batch(&self, items: &[ScoreItem]) -> Result<Vec<f64>, ScorerError> {
        invoke_external_scorer(&self.spec, items)
    }
}

/// Builds the scorer a spec describes. The multi-reference policy applies
/// to builtin metrics; external scorers receive every reference and combine
/// them themselves.
pub fn build_scorer(
    spec: &ScorerSpec,
    builtins: &PairMetricRegistry,
    policy: MultiRefPolicy,
) -> Result<Arc<dyn Scorer>, ScorerError> {
    spec.validate()?;
    Ok(match &spec.transport {
        Transport::Builtin { name } => Arc::new(BuiltinScorer {
            metric: spec.metric.clone(),
            kind: spec.kind,
            pair: builtins.get(name)?,
            policy,
        }),
        _ => Arc::new(ExternalScorer::new(spec.clone())),
    })
}

/// Renders request lines, one per item.
pub fn encode_requests(items: &[ScoreItem]) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("score item serializes"));
        out.push('\n');
    }
    out
}

#[derive(Deserialize)]
struct ScoreResponse {
    id: String,
    score: f64,
}

/// Matches response lines to requested ids. Returns whatever scores were
/// matched plus the first protocol failure, if any.
pub fn collect_responses(ids: &[&str], body: &str) -> (Vec<Option<f64>>, Option<BatchFailure>) {
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut scores = vec![None; ids.len()];
    for (n, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let resp: ScoreResponse = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                return (
                    scores,
                    Some(BatchFailure::Malformed {
                        line: n + 1,
                        message: e.to_string(),
                    }),
                )
            }
        };
        let Some(&i) = index.get(resp.id.as_str()) else {
            return (scores, Some(BatchFailure::UnknownId(resp.id)));
        };
        if scores[i].is_some() {
            return (scores, Some(BatchFailure::DuplicateId(resp.id)));
        }
        if !resp.score.is_finite() {
            return (
                scores,
                Some(BatchFailure::Malformed {
                    line: n + 1,
                    message: "score is not finite".into(),
                }),
            );
        }
        scores[i] = Some(resp.score);
    }
    let missing: Vec<String> = ids
        .iter()
        .zip(&scores)
        .filter(|(_, s)| s.is_none())
        .map(|(id, _)| id.to_string())
        .collect();
    if missing.is_empty() {
        (scores, None)
    } else {
        (scores, Some(BatchFailure::Missing(missing)))
    }
}

fn run_subprocess(command: &[String], input: String) -> Result<String, BatchFailure> {
    let program = if command[0] == "@self" {
        std::env::current_exe().map_err(|e| BatchFailure::Transport(e.to_string()))?
    } else {
        command[0].clone().into()
    };
    let mut child = Command::new(&program)
        .args(&command[1..])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| BatchFailure::Transport(format!("cannot start {}: {e}", program.display())))?;
    let mut stdin = child.stdin.take().expect("stdin piped");
    let writer = std::thread::spawn(move || {
        // A scorer that exits early closes the pipe; that shows up below as
        // a crash or missing ids.
        let _ = stdin.write_all(input.as_bytes());
    });
    let output = child
        .wait_with_output()
        .map_err(|e| BatchFailure::Transport(e.to_string()))?;
    let _ = writer.join();
    let stdout = String::from_utf8_lossy(&output.stdout).into_owned();
    if !output.status.success() {
        let stderr = String::from_utf8_lossy(&output.stderr);
        return Err(BatchFailure::Crashed(format!(
            "{}; {}",
            output.status,
            stderr.trim()
        )));
    }
    Ok(stdout)
}

fn run_http(url: &str, input: String) -> Result<String, BatchFailure> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(600)))
        .http_status_as_error(false)
        .build()
        .into();
    let mut resp = agent
        .post(url)
        .content_type("application/x-ndjson")
        .send(input)
        .map_err(|e| BatchFailure::Transport(e.to_string()))?;
    let status = resp.status().as_u16();
    let body = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| BatchFailure::Transport(e.to_string()))?;
    if !(200..300).contains(&status) {
        return Err(BatchFailure::Crashed(format!(
            "HTTP {status}: {}",
            body.trim()
        )));
    }
    Ok(body)
}

/// Scores `items` through the spec's transport in batches of
/// `spec.batch_size`, re-matching responses by id.
pub fn invoke_external_scorer(
    spec: &ScorerSpec,
    items: &[ScoreItem],
) -> Result<Vec<f64>, ScorerError> {
    spec.validate()?;
    let mut partial: Vec<Option<f64>> = vec![None; items.len()];
    for (chunk_idx, chunk) in items.chunks(spec.batch_size).enumerate() {
        let offset = chunk_idx * spec.batch_size;
        let input = encode_requests(chunk);
        let raw = match &spec.transport {
            Transport::Subprocess { command } => run_subprocess(command, input),
            Transport::Http { url } => run_http(url, input),
            Transport::Builtin { name } => {
                return Err(ScorerError::InvalidSpec(format!(
                    "builtin metric {name} is not an external scorer"
                )))
            }
        };
        let fail = |partial: Vec<Option<f64>>, failure| ScorerError::Batch {
            metric: spec.metric.clone(),
            partial,
            failure,
        };
        let body = match raw {
            Ok(b) => b,
            Err(BatchFailure::Crashed(msg)) => {
                return Err(fail(partial, BatchFailure::Crashed(msg)))
            }
            Err(f) => return Err(fail(partial, f)),
        };
        let ids: Vec<&str> = chunk.iter().map(|it| it.id.as_str()).collect();
        let (scores, failure) = collect_responses(&ids, &body);
        for (i, s) in scores.into_iter().enumerate() {
            partial[offset + i] = s;
        }
        if let Some(f) = failure {
            return Err(fail(partial, f));
        }
    }
    Ok(partial
        .into_iter()
        .map(|s| s.expect("all ids matched"))
        .collect())
}

/// Line-protocol server scoring each request with unigram F1 (max over
/// references). Used as a stand-in for neural scorers in tests and demos.
pub fn serve_mock_scorer(input: impl BufRead, mut output: impl Write) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: ScoreItem = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        let refs: Vec<&str> = item.references.iter().map(String::as_str).collect();
        let score =
            score_candidate(&item.candidate, &refs, unigram_f1, MultiRefPolicy::Max).unwrap_or(0.0);
        writeln!(
            output,
            "{}",
            serde_json::json!({"id": item.id, "score": score})
        )?;
    }
    output.flush()
}
