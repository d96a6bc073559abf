//! Run configuration, read from TOML. Relative paths are resolved against
//! the directory holding the config file.

use lookmark::corpus::{AdapterConfig, SourcePaths};
use lookmark::digest::{canonical_json, sha256_hex};
use lookmark::genclient::{builtin_adapters, ModelEndpoint};
use lookmark::metrics::{MetricSets, MultiRefPolicy, ScorerSpec};
use lookmark::promptkit::MethodFlags;
use lookmark::RenderSpec;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub boxes: PathBuf,
    pub fixations: PathBuf,
    pub reports: PathBuf,
    pub images: PathBuf,
    /// Optional findings/impression sidecar used only for corpus statistics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar: Option<PathBuf>,
    #[serde(default)]
    pub adapter: AdapterConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template: Option<PathBuf>,
    /// JSONL exemplar pool; required when any method uses in-context examples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exemplar_pool: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub clinical: Vec<String>,
    pub all: Vec<String>,
    pub multi_ref_policy: MultiRefPolicy,
    pub baseline: MethodFlags,
}

impl MetricsConfig {
    pub fn sets(&self) -> MetricSets {
        MetricSets {
            clinical: self.clinical.clone(),
            all: self.all.clone(),
        }
    }
}

impl Default for MetricsConfig {
    fn default() -> Self {
        let sets = MetricSets::default();
        Self {
            clinical: sets.clinical,
            all: sets.all,
            multi_ref_policy: MultiRefPolicy::Max,
            baseline: MethodFlags::BASELINE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub session_id: String,
    pub annotators: Vec<String>,
    pub bind: String,
    /// Environment variable holding the summary route's bearer token.
    pub token_env: String,
    pub show_images: bool,
    pub alpha_level: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            session_id: "default".into(),
            annotators: vec!["r1".into(), "r2".into(), "r3".into()],
            bind: "127.0.0.1:8787".into(),
            token_env: "LOOKMARK_EVAL_TOKEN".into(),
            show_images: true,
            alpha_level: "interval".into(),
        }
    }
}

fn default_methods() -> Vec<MethodFlags> {
    MethodFlags::ALL.to_vec()
}

fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Never written to the serialized copy or hashed, so outputs do not
    /// depend on where they live.
    #[serde(default, skip_serializing)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// RFC 3339 instant used for every timestamp instead of the wall clock.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_time: Option<String>,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodFlags>,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub render: RenderSpec,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub endpoints: Vec<ModelEndpoint>,
    #[serde(default)]
    pub scorers: Vec<ScorerSpec>,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Command-line overrides applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub methods: Option<Vec<MethodFlags>>,
    pub models: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.methods.is_empty() {
            return bad("methods is empty".into());
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return bad(format!("method {m} listed twice"));
            }
        }
        if self.concurrency == 0 {
            return bad("concurrency must be positive".into());
        }
        if let Some(t) = &self.fixed_time {
            if lookmark::clock::FixedClock::parse(t).is_err() {
                return bad(format!("fixed_time {t:?} is not RFC 3339"));
            }
        }
        self.render
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.methods.iter().any(|m| m.icl) && self.prompt.exemplar_pool.is_none() {
            return bad("in-context methods need prompt.exemplar_pool".into());
        }
        let adapters = builtin_adapters();
        for (i, ep) in self.endpoints.iter().enumerate() {
            if self.endpoints[..i].iter().any(|e| e.name == ep.name) {
                return bad(format!("endpoint {} listed twice", ep.name));
            }
            ep.validate()
                .map_err(|e| ConfigError::Invalid(format!("endpoint {}: {e}", ep.name)))?;
            adapters
                .get(&ep.adapter)
                .map_err(|e| ConfigError::Invalid(format!("endpoint {}: {e}", ep.name)))?;
        }
        for (i, s) in self.scorers.iter().enumerate() {
            if self.scorers[..i].iter().any(|o| o.metric == s.metric) {
                return bad(format!("scorer {} listed twice", s.metric));
            }
            s.validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        lookmark::experteval::builtin_levels()
            .get(&self.eval.alpha_level)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Hash of the canonical JSON form (output directory excluded).
    pub fn hash(&self) -> String {
        sha256_hex(canonical_json(self).expect("config serializes"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn selected_endpoints(&self, models: &[String]) -> Result<Vec<ModelEndpoint>, ConfigError> {
        if models.is_empty() {
            return Ok(self.endpoints.clone());
        }
        models
            .iter()
            .map(|m| {
                self.endpoints
                    .iter()
                    .find(|e| &e.name == m)
                    .cloned()
                    .ok_or_else(|| {
                        let names: Vec<&str> =
                            self.endpoints.iter().map(|e| e.name.as_str()).collect();
                        ConfigError::Invalid(format!(
                            "no endpoint named {m} (configured: {})",
                            names.join(", ")
                        ))
                    })
            })
            .collect()
    }
}

impl LoadedConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut config = RunConfig::parse(&text)?;
        if let Some(m) = &overrides.methods {
            config.methods = m.clone();
        }
        if let Some(s) = overrides.seed {
            config.seed = s;
        }
        if !overrides.models.is_empty() {
            config.endpoints = config.selected_endpoints(&overrides.models)?;
        }
        config.validate()?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let out_dir = match (&overrides.out, &config.out_dir) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => base_dir.join(o),
            (None, None) => base_dir.join("out"),
        };
        Ok(Self {
            config,
            base_dir,
            out_dir,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn sources(&self) -> SourcePaths {
        let s = &self.config.corpus;
        SourcePaths {
            boxes: self.resolve(&s.boxes),
            fixations: self.resolve(&s.fixations),
            reports: self.resolve(&s.reports),
            images: self.resolve(&s.images),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"
methods = ["-", "L&M"]
[corpus]
boxes = "b.csv"
fixations = "f.csv"
reports = "r.csv"
images = "i.csv"
"#;

    #[test]
    fn minimal_config_defaults() {
        let c = RunConfig::parse(MIN).unwrap();
        c.validate().unwrap();
        assert_eq!(
            c.methods,
            [MethodFlags::BASELINE, MethodFlags::new(true, true, false)]
        );
        assert_eq!(c.metrics.multi_ref_policy, MultiRefPolicy::Max);
        assert_eq!(c.render, RenderSpec::default());
    }

    #[test]
    fn serialized_copy_round_trips() {
        let mut c = RunConfig::parse(MIN).unwrap();
        c.out_dir = Some("/tmp/elsewhere".into());
        let again = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(again.out_dir, None);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn rejects_problems() {
        let icl = MIN.replace(r#"["-", "L&M"]"#, r#"["I&L"]"#);
        assert!(RunConfig::parse(&icl).unwrap().validate().is_err());
        let unknown = format!("{MIN}\nbogus = 1\n");
        assert!(RunConfig::parse(&unknown).is_err());
        let bad_temp = format!("{MIN}\n[[endpoints]]\nname = \"X\"\ntemperature_policy = [0.7]\n");
        assert!(RunConfig::parse(&bad_temp).unwrap().validate().is_err());
    }
}
