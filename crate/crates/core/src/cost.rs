//! Token pricing.

use alloc::string::{String, ToString};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// USD per million tokens. `None` means unknown unless the model is free.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pricing {
    #[serde(default)]
    pub price_in: Option<f64>,
    #[serde(default)]
    pub price_out: Option<f64>,
    /// Free to use (open weights or mock); prices are ignored.
    #[serde(default)]
    pub free: bool,
}

impl Pricing {
    pub const FREE: Pricing = Pricing { price_in: None, price_out: None, free: true };

    pub const fn per_million(price_in: f64, price_out: f64) -> Self {
        Pricing { price_in: Some(price_in), price_out: Some(price_out), free: false }
    }
}

/// Cost in USD of `tokens_in` prompt and `tokens_out` completion tokens.
pub fn estimate_cost(tokens_in: u64, tokens_out: u64, model_id: &str, pricing: &Pricing) -> Result<f64> {
    if pricing.free || (tokens_in == 0 && tokens_out == 0) {
        return Ok(0.0);
    }
    let part = |tokens: u64, price: Option<f64>| -> Result<f64> {
        if tokens == 0 {
            return Ok(0.0);
        }
        let price = price.ok_or_else(|| Error::MissingPrice(model_id.to_string()))?;
        Ok(tokens as f64 / 1e6 * price)
    };
    Ok(part(tokens_in, pricing.price_in)? + part(tokens_out, pricing.price_out)?)
}

/// One row of the shipped pricing table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceRow {
    pub model_id: &'static str,
    pub display_name: &'static str,
    pub provider: &'static str,
    pub pricing: Pricing,
    pub open_source: bool,
}

const fn row(model_id: &'static str, display_name: &'static str, provider: &'static str, pricing: Pricing, open_source: bool) -> PriceRow {
    PriceRow { model_id, display_name, provider, pricing, open_source }
}

/// Official API pricing (USD per million tokens) at the time the table was
/// compiled. Qwen and LLaMA models are free to access.
pub const DEFAULT_PRICE_TABLE: &[PriceRow] = &[
    row("gpt-4o", "GPT-4o", "OpenAI", Pricing::per_million(2.50, 10.00), false),
    row("gpt-4o-mini", "GPT-4o Mini", "OpenAI", Pricing::per_million(0.15, 0.60), false),
    row("deepseek-v3", "DeepSeek V3", "DeepSeek", Pricing::per_million(0.27, 1.10), true),
    row("qwen2.5-0.5b", "Qwen 2.5 0.5B", "Alibaba", Pricing::FREE, true),
    row("qwen2.5-1.5b", "Qwen 2.5 1.5B", "Alibaba", Pricing::FREE, true),
    row("qwen2.5-3b", "Qwen 2.5 3B", "Alibaba", Pricing::FREE, true),
    row("qwen2.5-7b", "Qwen 2.5 7B", "Alibaba", Pricing::FREE, true),
    row("qwen2.5-14b", "Qwen 2.5 14B", "Alibaba", Pricing::FREE, true),
    row("qwen2.5-32b", "Qwen 2.5 32B", "Alibaba", Pricing::FREE, true),
    row("qwen2.5-72b", "Qwen 2.5 72B", "Alibaba", Pricing::FREE, true),
    row("llama3.1-8b", "LLaMA 3.1 8B", "Meta", Pricing::FREE, true),
    row("llama3.1-70b", "LLaMA 3.1 70B", "Meta", Pricing::FREE, true),
];

pub fn default_pricing(model_id: &str) -> Option<Pricing> {
    DEFAULT_PRICE_TABLE.iter().find(|r| r.model_id == model_id).map(|r| r.pricing)
}

/// Per-model token totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub queries: u64,
}

impl Usage {
    pub fn record(&mut self, tokens_in: u64, tokens_out: u64) {
        self.tokens_in += tokens_in;
        self.tokens_out += tokens_out;
        self.queries += 1;
    }
}

pub fn model_label(id: &str) -> String {
    DEFAULT_PRICE_TABLE.iter().find(|r| r.model_id == id).map_or_else(|| id.to_string(), |r| r.display_name.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn price(id: &str) -> Pricing {
        default_pricing(id).unwrap()
    }

    #[test]
    fn table_rows() {
        assert_eq!(DEFAULT_PRICE_TABLE.len(), 12);
        let expected = [
            ("gpt-4o", Some(2.50), Some(10.00)),
            ("gpt-4o-mini", Some(0.15), Some(0.60)),
            ("deepseek-v3", Some(0.27), Some(1.10)),
        ];
        for (id, pin, pout) in expected {
            let p = price(id);
            assert_eq!((p.price_in, p.price_out, p.free), (pin, pout, false), "{id}");
        }
        for r in &DEFAULT_PRICE_TABLE[3..] {
            assert!(r.pricing.free && r.open_source, "{}", r.model_id);
            assert_eq!(estimate_cost(1_000_000, 1_000_000, r.model_id, &r.pricing).unwrap(), 0.0);
        }
        assert!(!DEFAULT_PRICE_TABLE[0].open_source && !DEFAULT_PRICE_TABLE[1].open_source);
        assert!(DEFAULT_PRICE_TABLE[2].open_source);
    }

    #[test]
    fn per_row_costs() {
        let one_m = 1_000_000;
        assert!((estimate_cost(one_m, 0, "gpt-4o", &price("gpt-4o")).unwrap() - 2.50).abs() < 1e-12);
        assert!((estimate_cost(0, one_m, "gpt-4o", &price("gpt-4o")).unwrap() - 10.00).abs() < 1e-12);
        assert!((estimate_cost(one_m, one_m, "gpt-4o-mini", &price("gpt-4o-mini")).unwrap() - 0.75).abs() < 1e-12);
        assert!((estimate_cost(one_m, one_m, "deepseek-v3", &price("deepseek-v3")).unwrap() - 1.37).abs() < 1e-12);
    }

    #[test]
    fn worked_example() {
        // 5,000 queries of 1,000 input tokens on GPT-4o.
        let cost = estimate_cost(5_000 * 1_000, 0, "gpt-4o", &price("gpt-4o")).unwrap();
        assert!((cost - 12.50).abs() < 1e-9);
    }

    #[test]
    fn zero_and_missing() {
        assert_eq!(estimate_cost(0, 0, "x", &Pricing::default()).unwrap(), 0.0);
        assert_eq!(estimate_cost(10, 0, "x", &Pricing::default()), Err(Error::MissingPrice("x".into())));
    }
}
