use crate::digest::hash_fields;
use serde::{Deserialize, Serialize};

/// The six evaluated models: three trained for radiology, three general.
pub const MODEL_ROSTER: [&str; 6] = [
    "CXR-LLaVA",
    "MAIRA2",
    "LLaVA-Med",
    "Llama3.2V",
    "LLaVA-OV",
    "Qwen2.5VL",
];

pub const DEFAULT_MAX_NEW_TOKENS: u32 = 512;
/// Temperatures tried in order; the second is used only when an endpoint
/// refuses the first.
pub const DEFAULT_TEMPERATURE_POLICY: [f64; 2] = [0.0, 0.1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelEndpoint {
    pub name: String,
    /// Adapter registry key.
    pub adapter: String,
    pub base_url: String,
    /// Model identifier sent on the wire; defaults to `name`.
    pub model_id: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub auth_env_var: Option<String>,
    pub temperature_policy: Vec<f64>,
    pub max_new_tokens: u32,
    pub request_timeout_s: u64,
    pub max_retries: u32,
}

impl Default for ModelEndpoint {
    fn default() -> Self {
        Self {
            name: String::new(),
            adapter: "openai-chat".into(),
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_id: None,
            auth_env_var: None,
            temperature_policy: DEFAULT_TEMPERATURE_POLICY.to_vec(),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            request_timeout_s: 120,
            max_retries: 2,
        }
    }
}

impl ModelEndpoint {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn wire_model(&self) -> &str {
        self.model_id.as_deref().unwrap_or(&self.name)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.name.trim().is_empty() {
            return Err("endpoint name is empty".into());
        }
        if self.temperature_policy.is_empty() {
            return Err(format!("{}: temperature_policy is empty", self.name));
        }
        if let Some(t) = self
            .temperature_policy
            .iter()
            .find(|t| !DEFAULT_TEMPERATURE_POLICY.contains(t))
        {
            return Err(format!("{}: temperature {t} not in {{0, 0.1}}", self.name));
        }
        if self.max_new_tokens == 0 {
            return Err(format!("{}: max_new_tokens must be positive", self.name));
        }
        Ok(())
    }

    /// Hash of every setting that changes what the endpoint would return.
    pub fn params_hash(&self) -> String {
        let temps = self
            .temperature_policy
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let max = self.max_new_tokens.to_string();
        hash_fields([
            self.adapter.as_str(),
            self.wire_model(),
            temps.as_str(),
            max.as_str(),
        ])
    }
}

/// Default registry entries for the evaluated models, all behind the
/// generic chat-completion adapter.
pub fn default_roster() -> Vec<ModelEndpoint> {
    MODEL_ROSTER
        .iter()
        .map(|n| ModelEndpoint::named(*n))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_decoding_settings() {
        for ep in default_roster() {
            assert_eq!(ep.max_new_tokens, 512);
            assert_eq!(ep.temperature_policy, vec![0.0, 0.1]);
            ep.validate().unwrap();
        }
    }

    #[test]
    fn params_hash_changes_with_decoding() {
        let a = ModelEndpoint::named("m");
        let mut b = a.clone();
        b.max_new_tokens = 256;
        assert_ne!(a.params_hash(), b.params_hash());
        let mut c = a.clone();
        c.base_url = "http://elsewhere".into();
        assert_eq!(a.params_hash(), c.params_hash());
    }

    #[test]
    fn rejects_other_temperatures() {
        let mut ep = ModelEndpoint::named("m");
        ep.temperature_policy = vec![0.7];
        assert!(ep.validate().is_err());
    }
}
