use std::collections::BTreeMap;
use std::sync::Mutex;

use proxex_core::cost::{estimate_cost, Pricing, Usage};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Per-model token accumulators. Updates are serialized behind a mutex.
#[derive(Debug, Default)]
pub struct CostLedger {
    usage: Mutex<BTreeMap<String, (Usage, Pricing)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCost {
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub queries: u64,
    /// `None` when a priced model has no configured price.
    pub usd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub models: BTreeMap<String, ModelCost>,
    pub total_usd: f64,
    /// Models whose cost could not be priced.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unpriced: Vec<String>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, model_id: &str, pricing: Pricing, tokens_in: u64, tokens_out: u64) {
        let mut usage = self.usage.lock().expect("ledger lock");
        let entry = usage.entry(model_id.to_string()).or_insert((Usage::default(), pricing));
        entry.0.record(tokens_in, tokens_out);
    }

    pub fn total_usd(&self) -> Result<f64> {
        let usage = self.usage.lock().expect("ledger lock");
        let mut total = 0.0;
        for (id, (u, p)) in usage.iter() {
            total += estimate_cost(u.tokens_in, u.tokens_out, id, p)?;
        }
        Ok(total)
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let usage = self.usage.lock().expect("ledger lock");
        let mut snap = LedgerSnapshot::default();
        for (id, (u, p)) in usage.iter() {
            let usd = estimate_cost(u.tokens_in, u.tokens_out, id, p).ok();
            match usd {
                Some(c) => snap.total_usd += c,
                None => snap.unpriced.push(id.clone()),
            }
            snap.models.insert(
                id.clone(),
                ModelCost { tokens_in: u.tokens_in, tokens_out: u.tokens_out, queries: u.queries, usd },
            );
        }
        snap
    }

    pub fn query_count(&self) -> u64 {
        self.usage.lock().expect("ledger lock").values().map(|(u, _)| u.queries).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_is_linear_in_tokens() {
        let ledger = CostLedger::new();
        let gpt = Pricing::per_million(2.5, 10.0);
        for _ in 0..5000 {
            ledger.record("gpt-4o", gpt, 1000, 0);
        }
        ledger.record("qwen2.5-7b", Pricing::FREE, 1_000_000, 1_000_000);
        assert!((ledger.total_usd().unwrap() - 12.5).abs() < 1e-9);
        let snap = ledger.snapshot();
        assert_eq!(snap.models["gpt-4o"].queries, 5000);
        assert_eq!(snap.models["qwen2.5-7b"].usd, Some(0.0));
        assert_eq!(ledger.query_count(), 5001);
    }

    #[test]
    fn unpriced_models_are_reported() {
        let ledger = CostLedger::new();
        ledger.record("mystery", Pricing::default(), 10, 10);
        assert!(ledger.total_usd().is_err());
        assert_eq!(ledger.snapshot().unpriced, vec!["mystery".to_string()]);
    }
}
