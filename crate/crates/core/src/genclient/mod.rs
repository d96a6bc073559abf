//! Report generation against chat-completion endpoints, with a
//! content-addressed result cache.

mod adapter;
mod endpoint;

pub use adapter::{
    builtin_adapters, chat_completion_body, classify_http, parse_chat_response, AdapterRegistry,
    CallError, ChatAdapter, ErrorClass, MockEchoAdapter, OpenAiChatAdapter,
};
pub use endpoint::{
    default_roster, ModelEndpoint, DEFAULT_MAX_NEW_TOKENS, DEFAULT_TEMPERATURE_POLICY, MODEL_ROSTER,
};

use crate::clock::{format_timestamp, Clock};
use crate::digest::hash_fields;
use crate::promptkit::{MethodFlags, PromptBundle};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_new_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub study_id: String,
    pub model: String,
    pub flags: MethodFlags,
    pub prompt_digest: String,
    pub output_text: String,
    pub decode: DecodeParams,
    pub latency_ms: u64,
    pub timestamp: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub study_id: String,
    pub model: String,
    pub flags: MethodFlags,
    pub prompt_digest: String,
    pub error_class: ErrorClass,
    pub message: String,
    pub attempts: u32,
}

/// One request per call. A temperature refusal moves to the next value in
/// the endpoint's policy; transient failures are retried up to
/// `max_retries` times.
pub fn generate_report(
    ep: &ModelEndpoint,
    adapter: &dyn ChatAdapter,
    bundle: &PromptBundle,
    clock: &dyn Clock,
) -> Result<GenerationRecord, GenerationFailure> {
    let start = clock.now();
    let mut temp_idx = 0;
    let mut retries = 0;
    let mut attempts = 0;
    loop {
        attempts += 1;
        let temperature = ep.temperature_policy.get(temp_idx).copied().unwrap_or(0.0);
        let body = adapter.build_request(ep, bundle, temperature);
        match adapter.send(ep, &body) {
            Ok(output_text) => {
                let end = clock.now();
                return Ok(GenerationRecord {
                    study_id: bundle.study_id.clone(),
                    model: ep.name.clone(),
                    flags: bundle.flags,
                    prompt_digest: bundle.digest.clone(),
                    output_text,
                    decode: DecodeParams {
                        temperature,
                        max_new_tokens: ep.max_new_tokens,
                    },
                    latency_ms: (end - start).num_milliseconds().max(0) as u64,
                    timestamp: format_timestamp(end),
                    attempts,
                });
            }
            Err(e)
                if e.class == ErrorClass::TemperatureRejected
                    && temp_idx + 1 < ep.temperature_policy.len() =>
            {
                log::info!(
                    "{}: temperature {temperature} refused, falling back",
                    ep.name
                );
                temp_idx += 1;
            }
            Err(e) if e.class.is_transient() && retries < ep.max_retries => {
                log::warn!("{} / {}: {e}; retrying", ep.name, bundle.study_id);
                retries += 1;
            }
            Err(e) => {
                return Err(GenerationFailure {
                    study_id: bundle.study_id.clone(),
                    model: ep.name.clone(),
                    flags: bundle.flags,
                    prompt_digest: bundle.digest.clone(),
                    error_class: e.class,
                    message: e.message,
                    attempts,
                })
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("generation cache {path}: {message}")]
pub struct CacheError {
    pub path: PathBuf,
    pub message: String,
}

/// Records stored one file per key; writes go through a temp file and a
/// rename so readers never see partial records.
#[derive(Debug, Clone)]
pub struct GenerationCache {
    dir: PathBuf,
}

impl GenerationCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, CacheError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| CacheError {
            path: dir.clone(),
            message: e.to_string(),
        })?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Key over (model, flags, prompt digest, decode-params hash).
    pub fn key(ep: &ModelEndpoint, flags: MethodFlags, prompt_digest: &str) -> String {
        let label = flags.label();
        let params = ep.params_hash();
        hash_fields([
            ep.name.as_str(),
            label.as_str(),
            prompt_digest,
            params.as_str(),
        ])
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<GenerationRecord>, CacheError> {
        let path = self.path(key);
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| CacheError {
                    path,
                    message: e.to_string(),
                }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(CacheError {
                path,
                message: e.to_string(),
            }),
        }
    }

    pub fn put(&self, key: &str, record: &GenerationRecord) -> Result<(), CacheError> {
        let path = self.path(key);
        let err = |message: String| CacheError {
            path: path.clone(),
            message,
        };
        let mut text = crate::digest::canonical_json(record).map_err(|e| err(e.to_string()))?;
        text.push('\n');
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| err(e.to_string()))?;
        tmp.write_all(text.as_bytes())
            .map_err(|e| err(e.to_string()))?;
        tmp.persist(&path).map_err(|e| err(e.error.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchReport {
    /// Sorted by study id, then method table order.
    pub records: Vec<GenerationRecord>,
    pub failures: Vec<GenerationFailure>,
    /// Studies sent to the endpoint (cache misses).
    pub generated: usize,
    pub cache_hits: usize,
}

/// Generates every bundle not already cached, with at most `concurrency`
/// requests in flight. Failures are reported, not cached, so a rerun
/// retries exactly those studies.
pub fn run_batch(
    bundles: &[PromptBundle],
    ep: &ModelEndpoint,
    adapter: &dyn ChatAdapter,
    cache: &GenerationCache,
    concurrency: usize,
    clock: &dyn Clock,
) -> Result<BatchReport, CacheError> {
    let mut report = BatchReport::default();
    let mut misses = Vec::new();
    for b in bundles {
        let key = GenerationCache::key(ep, b.flags, &b.digest);
        match cache.get(&key)? {
            Some(rec) => {
                report.cache_hits += 1;
                report.records.push(rec);
            }
            None => misses.push((key, b)),
        }
    }
    report.generated = misses.len();

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Result<GenerationRecord, GenerationFailure>>> = Mutex::new(Vec::new());
    let cache_err: Mutex<Option<CacheError>> = Mutex::new(None);
    let workers = concurrency.clamp(1, misses.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((key, bundle)) = misses.get(i) else {
                    break;
                };
                let outcome = generate_report(ep, adapter, bundle, clock);
                if let Ok(rec) = &outcome {
                    if let Err(e) = cache.put(key, rec) {
                        cache_err.lock().unwrap().get_or_insert(e);
                    }
                }
                results.lock().unwrap().push(outcome);
            });
        }
    });
    if let Some(e) = cache_err.into_inner().unwrap() {
        return Err(e);
    }
    for r in results.into_inner().unwrap() {
        match r {
            Ok(rec) => report.records.push(rec),
            Err(f) => report.failures.push(f),
        }
    }
    report.records.sort_by(|a, b| {
        (&a.study_id, a.flags.table_order()).cmp(&(&b.study_id, b.flags.table_order()))
    });
    report.failures.sort_by(|a, b| {
        (&a.study_id, a.flags.table_order()).cmp(&(&b.study_id, b.flags.table_order()))
    });
    Ok(report)
}
