//! Uniform access to target and proxy models.
//!
//! A [`ModelRegistry`] maps model ids to [`ModelSpec`]s, which point either at
//! an OpenAI-compatible HTTP endpoint or at a deterministic mock oracle
//! (`mock:<name>`). [`QueryEngine`] adds the sample-store cache, replay mode,
//! retries, bounded concurrency and token accounting on top.

mod engine;
mod ledger;
mod limiter;
pub mod mock;
pub mod openai;

use std::collections::BTreeMap;
use std::path::Path;

use proxex_core::cost::{default_pricing, Pricing};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use engine::{EngineOptions, QueryContext, QueryEngine};
pub use ledger::{CostLedger, LedgerSnapshot, ModelCost};
pub use limiter::Limiter;
pub use mock::{MockDefinition, MockOracle};

pub const MOCK_PREFIX: &str = "mock:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: String,
    /// Base URL of an OpenAI-compatible API, or `mock:<oracle-name>`.
    pub endpoint: String,
    /// Model name sent to the provider; defaults to `model_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_model: Option<String>,
    /// Environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price_in: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price_out: Option<f64>,
    #[serde(default)]
    pub free: bool,
    #[serde(default)]
    pub supports_logprobs: bool,
}

impl ModelSpec {
    pub fn mock_name(&self) -> Option<&str> {
        self.endpoint.strip_prefix(MOCK_PREFIX)
    }

    pub fn is_mock(&self) -> bool {
        self.mock_name().is_some()
    }

    /// Explicit prices, else the shipped table, else unknown. Mocks are free.
    pub fn pricing(&self) -> Pricing {
        if self.is_mock() || self.free {
            return Pricing::FREE;
        }
        if self.price_in.is_some() || self.price_out.is_some() {
            return Pricing { price_in: self.price_in, price_out: self.price_out, free: false };
        }
        default_pricing(&self.model_id).unwrap_or_default()
    }

    fn validate(&self) -> Result<()> {
        for p in [self.price_in, self.price_out].into_iter().flatten() {
            if !(p >= 0.0) {
                return Err(Error::Config(format!("model {}: negative price {p}", self.model_id)));
            }
        }
        if self.model_id.is_empty() {
            return Err(Error::Config("model id is empty".into()));
        }
        Ok(())
    }
}

/// Decoding parameters; part of every cache key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub logprobs: bool,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams { temperature: 0.0, max_tokens: 8, logprobs: true }
    }
}

impl DecodingParams {
    /// Canonical JSON (sorted keys).
    pub fn canonical(&self) -> serde_json::Value {
        // serde_json maps are sorted without the preserve_order feature.
        serde_json::to_value(self).expect("decoding params serialize")
    }
}

/// One completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Probability of the returned label or first token, in `[0, 1]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prob: Option<f64>,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

impl ModelOutput {
    pub fn text(text: impl Into<String>) -> Self {
        ModelOutput { text: text.into(), label: None, prob: None, tokens_in: 0, tokens_out: 0 }
    }
}

/// Whitespace token count used for mock token accounting.
pub fn count_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Embedding endpoint used by the generation scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub endpoint: String,
    pub api_model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistry {
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub mocks: BTreeMap<String, MockDefinition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<EmbeddingSpec>,
}

impl ModelRegistry {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let reg: ModelRegistry =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        reg.validate()?;
        Ok(reg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.models {
            m.validate()?;
            if !seen.insert(&m.model_id) {
                return Err(Error::Config(format!("duplicate model id {}", m.model_id)));
            }
            if let Some(name) = m.mock_name() {
                self.oracle(name, 0)?;
            }
        }
        Ok(())
    }

    pub fn get(&self, model_id: &str) -> Result<&ModelSpec> {
        self.models.iter().find(|m| m.model_id == model_id).ok_or_else(|| Error::UnknownModel(model_id.into()))
    }

    /// Registers a mock oracle under `name` and a model spec pointing at it.
    pub fn register_mock(&mut self, name: &str, definition: MockDefinition) -> Result<ModelSpec> {
        self.mocks.insert(name.to_string(), definition);
        if let Err(e) = self.oracle(name, 0) {
            self.mocks.remove(name);
            return Err(e);
        }
        let spec = ModelSpec {
            model_id: name.to_string(),
            endpoint: format!("{MOCK_PREFIX}{name}"),
            api_model: None,
            api_key_env: None,
            price_in: None,
            price_out: None,
            free: true,
            supports_logprobs: true,
        };
        self.models.retain(|m| m.model_id != name);
        self.models.push(spec.clone());
        Ok(spec)
    }

    /// Builds the oracle named `name`. `default_seed` seeds noisy oracles
    /// that do not fix their own seed.
    pub fn oracle(&self, name: &str, default_seed: u64) -> Result<MockOracle> {
        MockOracle::build(name, &self.mocks, default_seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_parses_and_prices() {
        let json = r#"{
            "models": [
                {"model_id": "gpt-4o", "endpoint": "https://api.openai.com/v1"},
                {"model_id": "custom", "endpoint": "http://localhost:1/v1", "price_in": 1.0, "price_out": 2.0},
                {"model_id": "m", "endpoint": "mock:const"}
            ],
            "mocks": {"const": {"kind": "constant", "output": "A"}}
        }"#;
        let reg: ModelRegistry = serde_json::from_str(json).unwrap();
        reg.validate().unwrap();
        assert_eq!(reg.get("gpt-4o").unwrap().pricing(), Pricing::per_million(2.5, 10.0));
        assert_eq!(reg.get("custom").unwrap().pricing().price_out, Some(2.0));
        assert!(reg.get("m").unwrap().pricing().free);
        assert!(matches!(reg.get("nope"), Err(Error::UnknownModel(_))));
    }

    #[test]
    fn unknown_mock_kind_is_config_error() {
        let json = r#"{"models": [], "mocks": {"x": {"kind": "telepathy"}}}"#;
        assert!(serde_json::from_str::<ModelRegistry>(json).is_err());
        let reg = ModelRegistry {
            models: vec![ModelSpec {
                model_id: "m".into(),
                endpoint: "mock:missing".into(),
                api_model: None,
                api_key_env: None,
                price_in: None,
                price_out: None,
                free: false,
                supports_logprobs: false,
            }],
            ..Default::default()
        };
        assert!(matches!(reg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn negative_price_rejected() {
        let json = r#"{"models": [{"model_id": "x", "endpoint": "http://h/v1", "price_in": -1.0}]}"#;
        let reg: ModelRegistry = serde_json::from_str(json).unwrap();
        assert!(matches!(reg.validate(), Err(Error::Config(_))));
    }
}
