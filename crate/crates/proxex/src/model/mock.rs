//! Deterministic mock oracles standing in for language models.
//!
//! Every oracle is a pure function of the prompt text, so results are
//! reproducible across processes and platforms.

use std::collections::{BTreeMap, HashMap};

use proxex_core::hash::{stable_hash64, unit_interval};
use serde::{Deserialize, Serialize};

use super::{count_tokens, ModelOutput};
use crate::error::{Error, Result};

fn default_binary_labels() -> Vec<String> {
    vec!["positive".into(), "negative".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MockDefinition {
    /// Always answers `output` with probability 1.
    Constant { output: String },
    /// `score = bias + Σ weight[word]` over word occurrences in the prompt;
    /// `p(positive) = logistic(score)`, positive iff `p >= 0.5`.
    LinearSentiment {
        weights: BTreeMap<String, f64>,
        #[serde(default)]
        bias: f64,
        /// `[positive, negative]` label names.
        #[serde(default = "default_binary_labels")]
        labels: Vec<String>,
    },
    /// Looks up the answer by which `features` occur in the prompt. Table keys
    /// are bitstrings over `features` (`"10110"`, feature 0 first).
    ChoiceTable {
        features: Vec<String>,
        #[serde(default)]
        table: BTreeMap<String, String>,
        default: String,
    },
    /// Flips the base oracle's label on a pseudo-random `flip_rate` fraction
    /// of distinct prompts, to the next entry of `labels`.
    Noisy {
        base: BaseRef,
        flip_rate: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default = "default_binary_labels")]
        labels: Vec<String>,
    },
}

/// A noisy oracle's base: another registered mock by name, or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BaseRef {
    Named(String),
    Inline(Box<MockDefinition>),
}

#[derive(Debug, Clone)]
pub enum MockOracle {
    Constant(String),
    Linear { weights: HashMap<String, f64>, bias: f64, positive: String, negative: String },
    ChoiceTable { features: Vec<String>, table: HashMap<String, String>, default: String },
    Noisy { base: Box<MockOracle>, flip_rate: f64, seed: u64, labels: Vec<String> },
}

const MAX_DEPTH: usize = 16;

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Lowercased words with surrounding punctuation stripped.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
}

impl MockOracle {
    pub fn build(name: &str, mocks: &BTreeMap<String, MockDefinition>, default_seed: u64) -> Result<Self> {
        let def = mocks.get(name).ok_or_else(|| Error::Config(format!("unknown mock oracle {name:?}")))?;
        Self::compile(name, def, mocks, default_seed, 0)
    }

    pub fn from_definition(def: &MockDefinition, default_seed: u64) -> Result<Self> {
        Self::compile("inline", def, &BTreeMap::new(), default_seed, 0)
    }

    fn compile(
        name: &str,
        def: &MockDefinition,
        mocks: &BTreeMap<String, MockDefinition>,
        default_seed: u64,
        depth: usize,
    ) -> Result<Self> {
        if depth > MAX_DEPTH {
            return Err(Error::Config(format!("mock {name:?}: base chain too deep or cyclic")));
        }
        Ok(match def {
            MockDefinition::Constant { output } => MockOracle::Constant(output.clone()),
            MockDefinition::LinearSentiment { weights, bias, labels } => {
                let [positive, negative] = labels.as_slice() else {
                    return Err(Error::Config(format!("mock {name:?}: linear-sentiment needs two labels")));
                };
                MockOracle::Linear {
                    weights: weights.iter().map(|(k, v)| (k.to_lowercase(), *v)).collect(),
                    bias: *bias,
                    positive: positive.clone(),
                    negative: negative.clone(),
                }
            }
            MockDefinition::ChoiceTable { features, table, default } => {
                for key in table.keys() {
                    if key.len() != features.len() || !key.chars().all(|c| c == '0' || c == '1') {
                        return Err(Error::Config(format!(
                            "mock {name:?}: table key {key:?} is not a {}-bit string",
                            features.len()
                        )));
                    }
                }
                MockOracle::ChoiceTable {
                    features: features.clone(),
                    table: table.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
                    default: default.clone(),
                }
            }
            MockDefinition::Noisy { base, flip_rate, seed, labels } => {
                if !(0.0..=1.0).contains(flip_rate) {
                    return Err(Error::Config(format!("mock {name:?}: flip rate {flip_rate} outside [0, 1]")));
                }
                if labels.len() < 2 {
                    return Err(Error::Config(format!("mock {name:?}: noisy oracle needs at least two labels")));
                }
                let base = match base {
                    BaseRef::Named(base_name) => {
                        let d = mocks
                            .get(base_name)
                            .ok_or_else(|| Error::Config(format!("mock {name:?}: unknown base {base_name:?}")))?;
                        Self::compile(base_name, d, mocks, default_seed, depth + 1)?
                    }
                    BaseRef::Inline(d) => Self::compile(name, d, mocks, default_seed, depth + 1)?,
                };
                let seed = seed.unwrap_or_else(|| stable_hash64(default_seed, format!("noisy:{name}").as_bytes()));
                MockOracle::Noisy { base: Box::new(base), flip_rate: *flip_rate, seed, labels: labels.clone() }
            }
        })
    }

    /// Answers `prompt`.
    pub fn respond(&self, prompt: &str) -> ModelOutput {
        let mut out = self.answer(prompt);
        out.tokens_in = count_tokens(prompt);
        out.tokens_out = count_tokens(&out.text);
        out
    }

    fn answer(&self, prompt: &str) -> ModelOutput {
        match self {
            MockOracle::Constant(output) => ModelOutput {
                text: output.clone(),
                label: Some(output.clone()),
                prob: Some(1.0),
                tokens_in: 0,
                tokens_out: 0,
            },
            MockOracle::Linear { weights, bias, positive, negative } => {
                let score = bias + words(prompt).filter_map(|w| weights.get(&w)).sum::<f64>();
                let p = logistic(score);
                let (label, prob) = if p >= 0.5 { (positive, p) } else { (negative, 1.0 - p) };
                ModelOutput { text: label.clone(), label: Some(label.clone()), prob: Some(prob), tokens_in: 0, tokens_out: 0 }
            }
            MockOracle::ChoiceTable { features, table, default } => {
                let key: String = features.iter().map(|f| if prompt.contains(f.as_str()) { '1' } else { '0' }).collect();
                let answer = table.get(&key).unwrap_or(default).clone();
                ModelOutput { text: answer.clone(), label: Some(answer), prob: Some(1.0), tokens_in: 0, tokens_out: 0 }
            }
            MockOracle::Noisy { base, flip_rate, seed, labels } => {
                let mut out = base.answer(prompt);
                if Self::flips(*seed, *flip_rate, prompt) {
                    let current = out.label.clone().unwrap_or_else(|| out.text.clone());
                    if let Some(i) = labels.iter().position(|l| *l == current) {
                        let flipped = labels[(i + 1) % labels.len()].clone();
                        out.text = flipped.clone();
                        out.label = Some(flipped);
                    }
                }
                out
            }
        }
    }

    /// Whether a noisy oracle with this seed and rate flips `prompt`.
    pub fn flips(seed: u64, flip_rate: f64, prompt: &str) -> bool {
        flip_unit(seed, prompt) < flip_rate
    }
}

/// Position of `prompt` in `[0, 1)` used for the flip decision.
pub fn flip_unit(seed: u64, prompt: &str) -> f64 {
    unit_interval(stable_hash64(seed, prompt.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear() -> MockOracle {
        let weights = [("great".to_string(), 2.0), ("terrible".to_string(), -3.0)].into_iter().collect();
        MockOracle::from_definition(
            &MockDefinition::LinearSentiment { weights, bias: 0.0, labels: default_binary_labels() },
            0,
        )
        .unwrap()
    }

    #[test]
    fn constant_oracle() {
        let o = MockOracle::from_definition(&MockDefinition::Constant { output: "A".into() }, 0).unwrap();
        let out = o.respond("anything at all");
        assert_eq!(out.text, "A");
        assert_eq!(out.prob, Some(1.0));
        assert_eq!(out.tokens_in, 3);
    }

    #[test]
    fn linear_sentiment_oracle() {
        let o = linear();
        let out = o.respond("great");
        assert_eq!(out.label.as_deref(), Some("positive"));
        assert!((out.prob.unwrap() - 0.880797077977882).abs() < 1e-12);
        let empty = o.respond("");
        assert_eq!(empty.label.as_deref(), Some("positive"));
        assert_eq!(empty.prob, Some(0.5));
        let neg = o.respond("Great, but TERRIBLE!");
        assert_eq!(neg.label.as_deref(), Some("negative"));
        assert!((neg.prob.unwrap() - (1.0 - logistic(-1.0))).abs() < 1e-12);
        // Occurrences add up.
        assert!((o.respond("great great").prob.unwrap() - logistic(4.0)).abs() < 1e-12);
    }

    #[test]
    fn choice_table_oracle() {
        let def = MockDefinition::ChoiceTable {
            features: vec!["ex-one".into(), "ex-two".into()],
            table: [("11".to_string(), "B".to_string())].into_iter().collect(),
            default: "C".into(),
        };
        let o = MockOracle::from_definition(&def, 0).unwrap();
        assert_eq!(o.respond("ex-one ex-two Q").text, "B");
        assert_eq!(o.respond("ex-two Q").text, "C");
        let bad = MockDefinition::ChoiceTable { features: vec!["a".into()], table: [("10".into(), "B".into())].into_iter().collect(), default: "C".into() };
        assert!(MockOracle::from_definition(&bad, 0).is_err());
    }

    #[test]
    fn noisy_oracle_is_pure_and_flips_at_rate() {
        let mut mocks = BTreeMap::new();
        mocks.insert("base".to_string(), MockDefinition::Constant { output: "positive".into() });
        mocks.insert(
            "noisy".to_string(),
            MockDefinition::Noisy { base: BaseRef::Named("base".into()), flip_rate: 0.3, seed: Some(5), labels: default_binary_labels() },
        );
        let o = MockOracle::build("noisy", &mocks, 0).unwrap();
        let prompts: Vec<String> = (0..2000).map(|i| format!("prompt number {i}")).collect();
        let flipped: Vec<bool> = prompts.iter().map(|p| o.respond(p).text == "negative").collect();
        let again: Vec<bool> = prompts.iter().map(|p| o.respond(p).text == "negative").collect();
        assert_eq!(flipped, again);
        // The oracle flips exactly the prompts whose hash position is below the rate.
        let expected: Vec<bool> = prompts.iter().map(|p| flip_unit(5, p) < 0.3).collect();
        assert_eq!(flipped, expected);
        let rate = flipped.iter().filter(|f| **f).count() as f64 / 2000.0;
        assert!((rate - 0.3).abs() < 0.05, "{rate}");
    }

    #[test]
    fn cyclic_noisy_chain_rejected() {
        let mut mocks = BTreeMap::new();
        mocks.insert(
            "a".to_string(),
            MockDefinition::Noisy { base: BaseRef::Named("a".into()), flip_rate: 0.1, seed: None, labels: default_binary_labels() },
        );
        assert!(matches!(MockOracle::build("a", &mocks, 0), Err(Error::Config(_))));
    }

    #[test]
    fn definitions_parse_from_json() {
        let json = r#"{"kind": "noisy", "base": {"kind": "constant", "output": "positive"}, "flip_rate": 0.1}"#;
        let def: MockDefinition = serde_json::from_str(json).unwrap();
        assert!(matches!(def, MockDefinition::Noisy { base: BaseRef::Inline(_), .. }));
        let named: MockDefinition = serde_json::from_str(r#"{"kind": "noisy", "base": "x", "flip_rate": 0.1}"#).unwrap();
        assert!(matches!(named, MockDefinition::Noisy { base: BaseRef::Named(_), .. }));
    }
}
