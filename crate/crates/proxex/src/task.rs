//! Task adapters: prompt construction, output parsing and response values.

use std::collections::HashMap;
use std::sync::OnceLock;

use proxex_core::fidelity::ResponseCoding;
use proxex_core::perturbation::DEFAULT_EXAMPLE_DELIMITER;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelOutput;

pub const INPUT_SLOT: &str = "{input}";
pub const EXAMPLES_SLOT: &str = "{examples}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Sentiment,
    MultipleChoice,
    Generation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GenerationScorer {
    #[default]
    TokenF1,
    EmbeddingCosine,
}

impl TaskKind {
    pub fn default_labels(self) -> &'static [String] {
        static SENTIMENT: OnceLock<Vec<String>> = OnceLock::new();
        static CHOICE: OnceLock<Vec<String>> = OnceLock::new();
        match self {
            TaskKind::Sentiment => SENTIMENT.get_or_init(|| vec!["positive".into(), "negative".into()]),
            TaskKind::MultipleChoice => CHOICE.get_or_init(|| ["A", "B", "C", "D"].map(String::from).to_vec()),
            TaskKind::Generation => &[],
        }
    }

    pub fn default_template(self) -> &'static str {
        match self {
            TaskKind::Sentiment => {
                "Classify the sentiment of the following sentence as positive or negative. \
                 Answer with a single word.\n\nSentence: {input}\nSentiment:"
            }
            TaskKind::MultipleChoice => {
                "The following are multiple choice questions. Answer with the letter of the correct option.\n\n\
                 {examples}{input}\nAnswer:"
            }
            TaskKind::Generation => "Answer the question with a short answer.\n\nQuestion: {input}\nAnswer:",
        }
    }
}

fn default_delimiter() -> String {
    DEFAULT_EXAMPLE_DELIMITER.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Template with an `{input}` slot and, for in-context tasks, an
    /// `{examples}` slot. Defaults per kind.
    #[serde(default)]
    pub prompt_template: Option<String>,
    #[serde(default)]
    pub label_set: Option<Vec<String>>,
    #[serde(default)]
    pub icl_examples: Vec<String>,
    #[serde(default = "default_delimiter")]
    pub example_delimiter: String,
    #[serde(default)]
    pub reference_output: Option<String>,
    #[serde(default)]
    pub scorer: GenerationScorer,
    #[serde(default)]
    pub response_coding: ResponseCoding,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        TaskSpec {
            kind,
            prompt_template: None,
            label_set: None,
            icl_examples: Vec::new(),
            example_delimiter: default_delimiter(),
            reference_output: None,
            scorer: GenerationScorer::default(),
            response_coding: ResponseCoding::default(),
        }
    }

    pub fn template(&self) -> &str {
        self.prompt_template.as_deref().unwrap_or_else(|| self.kind.default_template())
    }

    /// The configured label set, else the kind's default.
    pub fn labels(&self) -> &[String] {
        self.label_set.as_deref().unwrap_or_else(|| self.kind.default_labels())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.template().contains(INPUT_SLOT) {
            return Err(Error::Config(format!("prompt template lacks the {INPUT_SLOT} slot")));
        }
        match self.kind {
            TaskKind::Sentiment => {
                let labels: Vec<String> = self.labels().iter().map(|l| l.to_lowercase()).collect();
                if labels != ["positive", "negative"] {
                    return Err(Error::Config("sentiment label set must be [positive, negative]".into()));
                }
            }
            TaskKind::MultipleChoice => {
                let labels = self.labels();
                if labels.is_empty() {
                    return Err(Error::Config("multiple-choice task needs a label set".into()));
                }
                let mut seen = std::collections::BTreeSet::new();
                for l in labels {
                    if l.trim().is_empty() || !seen.insert(l.to_lowercase()) {
                        return Err(Error::Config(format!("label set has an empty or repeated label {l:?}")));
                    }
                }
            }
            TaskKind::Generation => {}
        }
        if self.example_delimiter.is_empty() {
            return Err(Error::Config("example delimiter is empty".into()));
        }
        Ok(())
    }

    /// All in-context examples joined by the delimiter.
    pub fn examples_block(&self) -> String {
        self.icl_examples.join(&self.example_delimiter)
    }

    /// Fills the template. `examples` is the (possibly masked) examples block.
    pub fn render(&self, examples: &str, input: &str) -> String {
        let examples = if examples.is_empty() { String::new() } else { format!("{examples}{}", self.example_delimiter) };
        self.template().replace(EXAMPLES_SLOT, &examples).replace(INPUT_SLOT, input)
    }

    /// Prompt for `instance_text` with every in-context example present.
    pub fn build_prompt(&self, instance_text: &str) -> String {
        self.render(&self.examples_block(), instance_text)
    }

    /// Number of response dimensions a fit produces.
    pub fn response_dims(&self) -> usize {
        match self.kind {
            TaskKind::MultipleChoice => self.labels().len(),
            TaskKind::Sentiment | TaskKind::Generation => 1,
        }
    }

    /// Names of the response dimensions.
    pub fn response_names(&self) -> Vec<String> {
        match self.kind {
            TaskKind::Sentiment => vec![self.labels()[0].clone()],
            TaskKind::MultipleChoice => self.labels().to_vec(),
            TaskKind::Generation => vec!["score".into()],
        }
    }
}

/// Splits on anything that is not alphanumeric.
fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty())
}

/// Index of the first valid label occurring in `text` (case-insensitive,
/// punctuation ignored).
pub fn parse_label(labels: &[String], text: &str) -> Result<usize> {
    let lowered: Vec<String> = labels.iter().map(|l| l.to_lowercase()).collect();
    let token_labels: Vec<Vec<String>> = lowered.iter().map(|l| tokens(l).map(str::to_string).collect()).collect();
    let toks: Vec<String> = tokens(text).map(str::to_lowercase).collect();
    for start in 0..toks.len() {
        for (i, lt) in token_labels.iter().enumerate() {
            if !lt.is_empty() && toks[start..].starts_with(lt) {
                return Ok(i);
            }
        }
    }
    Err(Error::UnparseableOutput(text.to_string()))
}

/// Probability attached to the parsed label: the output's probability, or 1
/// when the endpoint returned none.
fn label_prob(out: &ModelOutput) -> f64 {
    out.prob.unwrap_or(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Parsed {
    Label { index: usize, prob: f64 },
    Text(String),
}

pub fn parse_output(task: &TaskSpec, out: &ModelOutput) -> Result<Parsed> {
    match task.kind {
        TaskKind::Sentiment | TaskKind::MultipleChoice => {
            let index = parse_label(task.labels(), &out.text)?;
            Ok(Parsed::Label { index, prob: label_prob(out) })
        }
        TaskKind::Generation => Ok(Parsed::Text(out.text.trim().to_string())),
    }
}

/// Response vector of a classification output: positive-class value for
/// sentiment, one-vs-rest label probabilities for multiple choice.
pub fn label_response(task: &TaskSpec, index: usize, prob: f64) -> Vec<f64> {
    match task.kind {
        TaskKind::Sentiment => {
            let p_positive = if index == 0 { prob } else { 1.0 - prob };
            vec![task.response_coding.encode(p_positive)]
        }
        _ => (0..task.response_dims()).map(|c| if c == index { prob } else { 0.0 }).collect(),
    }
}

/// Probability the output assigns to label `y` (indicator convention when no
/// probability is available; unparseable outputs give 0).
pub fn prob_of_label(task: &TaskSpec, out: &ModelOutput, y: usize) -> f64 {
    match parse_output(task, out) {
        Ok(Parsed::Label { index, prob }) => match task.kind {
            TaskKind::Sentiment if index != y => 1.0 - prob,
            _ if index == y => prob,
            _ => 0.0,
        },
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationScore {
    pub value: f64,
    pub scorer: GenerationScorer,
}

pub trait Embedder {
    fn embed(&self, inputs: &[&str]) -> Result<Vec<Vec<f64>>>;
}

impl Embedder for crate::model::QueryEngine {
    fn embed(&self, inputs: &[&str]) -> Result<Vec<Vec<f64>>> {
        crate::model::QueryEngine::embed(self, inputs)
    }
}

/// Harmonic mean of token precision and recall over lowercased whitespace
/// tokens, counting multiplicity.
pub fn token_f1(candidate: &str, reference: &str) -> f64 {
    let count = |s: &str| {
        let mut m: HashMap<String, usize> = HashMap::new();
        for t in s.split_whitespace() {
            *m.entry(t.to_lowercase()).or_default() += 1;
        }
        m
    };
    let c = count(candidate);
    let r = count(reference);
    let c_total: usize = c.values().sum();
    let r_total: usize = r.values().sum();
    if c_total == 0 || r_total == 0 {
        return if c_total == r_total { 1.0 } else { 0.0 };
    }
    let overlap: usize = c.iter().map(|(t, n)| (*n).min(r.get(t).copied().unwrap_or(0))).sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / c_total as f64;
    let recall = overlap as f64 / r_total as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Cosine similarity of unit-normalized vectors; 0 when either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || a.len() != b.len() {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum();
    dot.clamp(-1.0, 1.0)
}

pub fn score_generation(
    candidate: &str,
    reference: &str,
    scorer: GenerationScorer,
    embedder: Option<&dyn Embedder>,
) -> Result<GenerationScore> {
    Ok(score_many(&[candidate], reference, scorer, embedder)?.remove(0))
}

/// Scores every candidate against one reference, embedding in a single batch.
pub fn score_many(
    candidates: &[&str],
    reference: &str,
    scorer: GenerationScorer,
    embedder: Option<&dyn Embedder>,
) -> Result<Vec<GenerationScore>> {
    if reference.trim().is_empty() {
        return Err(Error::Core(proxex_core::Error::InvalidArgument("empty generation reference".into())));
    }
    let values: Vec<f64> = match scorer {
        GenerationScorer::TokenF1 => candidates.iter().map(|c| token_f1(c, reference)).collect(),
        GenerationScorer::EmbeddingCosine => {
            let embedder = embedder.ok_or_else(|| Error::ScorerUnavailable("no embedder configured".into()))?;
            let mut inputs: Vec<&str> = vec![reference];
            inputs.extend_from_slice(candidates);
            let emb = embedder.embed(&inputs)?;
            if emb.len() != inputs.len() {
                return Err(Error::Protocol(format!("expected {} embeddings, got {}", inputs.len(), emb.len())));
            }
            emb[1..].iter().map(|e| cosine(e, &emb[0])).collect()
        }
    };
    Ok(values.into_iter().map(|value| GenerationScore { value, scorer }).collect())
}
