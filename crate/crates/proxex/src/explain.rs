//! Perturb, query, fit: local explanations of one model on one instance.

use proxex_core::fidelity::ResponseCoding;
use proxex_core::hash::stable_hash64;
use proxex_core::perturbation::{
    apply_mask, is_exhaustive, lime_weight, sample_masks, segment, shap_weight, SamplingStrategy, DEFAULT_KERNEL_WIDTH,
    DEFAULT_SAMPLES,
};
use proxex_core::solvers::{fit_kernel_shap, fit_lime, DEFAULT_RIDGE_LAMBDA};
use proxex_core::{Attribution, FeatureSegmentation, Mask, Method, RegressionSample, SegmentationMode};
use serde::{Deserialize, Serialize};

use crate::datasets::Instance;
use crate::error::{Error, Result};
use crate::model::{ModelOutput, QueryContext, QueryEngine};
use crate::task::{label_response, parse_output, score_many, Embedder, Parsed, TaskKind, TaskSpec};

/// Named sub-seed derived from the run seed.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    stable_hash64(seed, name.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainSettings {
    pub method: Method,
    pub n_samples: usize,
    pub seed: u64,
    pub segmentation: SegmentationMode,
    /// Overrides the method's default sampler.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingStrategy>,
    pub ridge_lambda: f64,
    pub kernel_width: f64,
}

impl Default for ExplainSettings {
    fn default() -> Self {
        ExplainSettings {
            method: Method::KernelShap,
            n_samples: DEFAULT_SAMPLES,
            seed: 0,
            segmentation: SegmentationMode::Word,
            sampling: None,
            ridge_lambda: DEFAULT_RIDGE_LAMBDA,
            kernel_width: DEFAULT_KERNEL_WIDTH,
        }
    }
}

impl ExplainSettings {
    pub fn strategy(&self) -> SamplingStrategy {
        self.sampling.unwrap_or(match self.method {
            Method::Lime => SamplingStrategy::LimeUniformSize,
            Method::KernelShap => SamplingStrategy::ShapKernel,
        })
    }
}

/// The perturbation neighbourhood of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSet {
    pub dataset_id: String,
    pub instance_id: String,
    pub segmentation: FeatureSegmentation,
    /// Instance text; fixed when the features are in-context examples.
    pub input: String,
    pub masks: Vec<Mask>,
    pub prompts: Vec<String>,
    pub exhaustive: bool,
    pub seed: u64,
}

impl PerturbationSet {
    /// Features are in-context example blocks rather than parts of the input.
    pub fn over_examples(&self) -> bool {
        matches!(self.segmentation.mode, SegmentationMode::ExampleBlock { .. })
    }

    pub fn n(&self) -> usize {
        self.segmentation.n()
    }

    pub fn render(&self, task: &TaskSpec, mask: &Mask) -> Result<String> {
        let masked = apply_mask(&self.segmentation, mask)?;
        Ok(if self.over_examples() { task.render(&masked, &self.input) } else { task.render(&task.examples_block(), &masked) })
    }

    pub fn context(&self, mask: &Mask) -> QueryContext {
        QueryContext {
            dataset_id: self.dataset_id.clone(),
            instance_id: self.instance_id.clone(),
            segmentation_mode: self.segmentation.mode.name().to_string(),
            mask: mask.to_bitstring(),
        }
    }

    fn position(&self, pred: impl Fn(&Mask) -> bool) -> Option<usize> {
        self.masks.iter().position(pred)
    }

    pub fn full_index(&self) -> Option<usize> {
        self.position(Mask::is_full)
    }

    /// Answers `mask` with `model`, through the cache.
    pub fn query(&self, engine: &QueryEngine, model_id: &str, task: &TaskSpec, mask: &Mask) -> Result<ModelOutput> {
        engine.cached_query(model_id, &self.render(task, mask)?, &self.context(mask))
    }

    /// Answers every mask. Replay misses are collected into one error.
    pub fn query_all(&self, engine: &QueryEngine, model_id: &str) -> Result<Vec<ModelOutput>> {
        let batch: Vec<(String, QueryContext)> =
            self.prompts.iter().cloned().zip(self.masks.iter().map(|m| self.context(m))).collect();
        collect_outputs(model_id, engine.query_all(model_id, &batch))
    }
}

/// Unwraps a batch of results; replay misses are merged into one error.
pub fn collect_outputs(model_id: &str, results: Vec<Result<ModelOutput>>) -> Result<Vec<ModelOutput>> {
    let mut outputs = Vec::with_capacity(results.len());
    let mut misses = Vec::new();
    let mut other = None;
    for r in results {
        match r {
            Ok(o) => outputs.push(o),
            Err(Error::ReplayMiss { prompt_hash, .. }) => misses.push(prompt_hash),
            Err(e) => {
                other.get_or_insert(e);
            }
        }
    }
    if let Some(e) = other {
        return Err(e);
    }
    if !misses.is_empty() {
        misses.sort();
        misses.dedup();
        return Err(Error::ReplayMisses { model_id: model_id.to_string(), prompt_hashes: misses });
    }
    Ok(outputs)
}

/// Segments the instance (or the task's examples) and draws masks with the
/// instance's sub-seed. `tag` separates independent draws for one instance.
pub fn perturb(
    task: &TaskSpec,
    settings: &ExplainSettings,
    dataset_id: &str,
    instance: &Instance,
    tag: &str,
) -> Result<PerturbationSet> {
    let over_examples = matches!(settings.segmentation, SegmentationMode::ExampleBlock { .. });
    let text = if over_examples { task.examples_block() } else { instance.text.clone() };
    let segmentation = segment(&text, &settings.segmentation)?;
    let n = segmentation.n();
    let strategy = settings.strategy();
    let seed = sub_seed(settings.seed, &format!("{tag}:{dataset_id}:{}", instance.id));
    let masks = sample_masks(n, settings.n_samples, strategy, seed)?;
    let mut set = PerturbationSet {
        dataset_id: dataset_id.to_string(),
        instance_id: instance.id.clone(),
        segmentation,
        input: instance.text.clone(),
        masks: Vec::new(),
        prompts: Vec::new(),
        exhaustive: is_exhaustive(n, settings.n_samples, strategy),
        seed,
    };
    set.prompts = masks.iter().map(|m| set.render(task, m)).collect::<Result<_>>()?;
    set.masks = masks;
    Ok(set)
}

/// Unperturbed prediction. Unparseable predictions never agree with anything.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction(pub Option<String>);

impl PartialEq for Prediction {
    fn eq(&self, other: &Self) -> bool {
        matches!((&self.0, &other.0), (Some(a), Some(b)) if a == b)
    }
}

/// One model's parsed answers over a perturbation set.
#[derive(Debug, Clone, PartialEq)]
pub struct Responses {
    pub model_id: String,
    /// Parsed label per mask; `None` for unparseable or generation outputs.
    pub labels: Vec<Option<usize>>,
    /// Response vector per mask; `None` marks an unparseable output.
    pub values: Vec<Option<Vec<f64>>>,
    pub prediction: Prediction,
    pub unparseable: usize,
}

impl Responses {
    pub fn build(
        task: &TaskSpec,
        set: &PerturbationSet,
        model_id: &str,
        outputs: &[ModelOutput],
        embedder: Option<&dyn Embedder>,
    ) -> Result<Self> {
        let full = set.full_index().map(|i| &outputs[i]);
        let mut labels = Vec::with_capacity(outputs.len());
        let mut values = Vec::with_capacity(outputs.len());
        let mut unparseable = 0;
        let prediction;
        if task.kind == TaskKind::Generation {
            let reference = match (&task.reference_output, full) {
                (Some(r), _) => r.clone(),
                (None, Some(out)) => out.text.trim().to_string(),
                (None, None) => return Err(Error::Config("generation responses need the unperturbed output".into())),
            };
            let texts: Vec<&str> = outputs.iter().map(|o| o.text.trim()).collect();
            let scores = score_many(&texts, &reference, task.scorer, embedder)?;
            labels.resize(outputs.len(), None);
            values = scores.into_iter().map(|s| Some(vec![s.value])).collect();
            prediction = Prediction(full.map(|o| o.text.trim().to_string()));
        } else {
            for out in outputs {
                match parse_output(task, out) {
                    Ok(Parsed::Label { index, prob }) => {
                        labels.push(Some(index));
                        values.push(Some(label_response(task, index, prob)));
                    }
                    Ok(Parsed::Text(_)) => unreachable!("classification task parsed as text"),
                    Err(Error::UnparseableOutput(_)) => {
                        unparseable += 1;
                        labels.push(None);
                        values.push(None);
                    }
                    Err(e) => return Err(e),
                }
            }
            let label = set.full_index().and_then(|i| labels[i]).map(|i| task.labels()[i].clone());
            prediction = Prediction(label);
        }
        Ok(Responses { model_id: model_id.to_string(), labels, values, prediction, unparseable })
    }

    /// Predicted label index on the unperturbed input.
    pub fn predicted_label(&self, set: &PerturbationSet) -> Option<usize> {
        set.full_index().and_then(|i| self.labels[i])
    }

    /// Population variance of the first response dimension.
    pub fn variance(&self) -> Option<f64> {
        let ys: Vec<f64> = self.values.iter().flatten().map(|v| v[0]).collect();
        if ys.is_empty() {
            return None;
        }
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        Some(ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / ys.len() as f64)
    }
}

/// Explanation of one model on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub dataset_id: String,
    pub instance_id: String,
    pub model_id: String,
    pub segmentation_mode: String,
    pub features: Vec<String>,
    /// One attribution per response dimension.
    pub response_names: Vec<String>,
    pub attributions: Vec<Attribution>,
    pub prediction: Option<String>,
    pub sampling: SamplingStrategy,
    pub exhaustive: bool,
    pub n_masks: usize,
    pub unparseable: usize,
    pub response_coding: ResponseCoding,
    pub kernel_width: f64,
    pub ridge_lambda: f64,
}

impl Explanation {
    /// Attribution towards label `label` (the first dimension for
    /// generation).
    pub fn for_label(&self, task: &TaskSpec, label: usize) -> Attribution {
        match task.kind {
            TaskKind::Sentiment if label != 0 => {
                let a = &self.attributions[0];
                match task.response_coding {
                    ResponseCoding::Probability => a.complement(),
                    ResponseCoding::Signed | ResponseCoding::LogOdds => {
                        let mut out = a.clone();
                        out.values.iter_mut().for_each(|v| *v = -*v);
                        out.intercept = -out.intercept;
                        out
                    }
                }
            }
            TaskKind::MultipleChoice => self.attributions[label].clone(),
            _ => self.attributions[0].clone(),
        }
    }
}

fn fit_dimension(settings: &ExplainSettings, set: &PerturbationSet, responses: &Responses, d: usize) -> Result<Attribution> {
    let n = set.n();
    let y = |i: usize| responses.values[i].as_ref().map(|v| v[d]);
    let mut attr = match settings.method {
        Method::Lime => {
            let samples: Vec<RegressionSample> = set
                .masks
                .iter()
                .enumerate()
                .filter_map(|(i, m)| y(i).map(|y| RegressionSample::new(m.clone(), y, lime_weight(m, settings.kernel_width))))
                .collect();
            fit_lime(&samples, settings.ridge_lambda)?
        }
        Method::KernelShap => {
            let anchor = |pred: fn(&Mask) -> bool, what: &str| {
                set.position(pred).and_then(y).ok_or_else(|| {
                    Error::Core(proxex_core::Error::IncompleteInput(format!(
                        "kernel SHAP needs a parseable {what}-coalition output"
                    )))
                })
            };
            let f_full = anchor(Mask::is_full, "full")?;
            let f_empty = anchor(Mask::is_all_zero, "empty")?;
            let mut samples = Vec::with_capacity(set.masks.len());
            for (i, m) in set.masks.iter().enumerate() {
                if m.is_full() || m.is_all_zero() {
                    continue;
                }
                if let Some(y) = y(i) {
                    let w = if set.exhaustive { shap_weight(m)? } else { 1.0 };
                    samples.push(RegressionSample::new(m.clone(), y, w));
                }
            }
            fit_kernel_shap(&samples, n, f_full, f_empty)?
        }
    };
    attr.n_samples = set.masks.len();
    attr.seed = set.seed;
    Ok(attr)
}

/// Fits one attribution per response dimension.
pub fn fit(
    task: &TaskSpec,
    settings: &ExplainSettings,
    set: &PerturbationSet,
    responses: &Responses,
) -> Result<Explanation> {
    let mut attributions = Vec::with_capacity(task.response_dims());
    for d in 0..task.response_dims() {
        let mut a = fit_dimension(settings, set, responses, d)?;
        a.proxy_model_id = responses.model_id.clone();
        a.target_model_id = responses.model_id.clone();
        attributions.push(a);
    }
    Ok(Explanation {
        dataset_id: set.dataset_id.clone(),
        instance_id: set.instance_id.clone(),
        model_id: responses.model_id.clone(),
        segmentation_mode: set.segmentation.mode.name().to_string(),
        features: set.segmentation.texts().map(str::to_string).collect(),
        response_names: task.response_names(),
        attributions,
        prediction: responses.prediction.0.clone(),
        sampling: settings.strategy(),
        exhaustive: set.exhaustive,
        n_masks: set.masks.len(),
        unparseable: responses.unparseable,
        response_coding: task.response_coding,
        kernel_width: settings.kernel_width,
        ridge_lambda: settings.ridge_lambda,
    })
}

/// Everything produced for one model on one instance.
#[derive(Debug, Clone)]
pub struct Explained {
    pub set: PerturbationSet,
    pub responses: Responses,
    pub explanation: Explanation,
}

pub fn explain_instance(
    engine: &QueryEngine,
    task: &TaskSpec,
    settings: &ExplainSettings,
    dataset_id: &str,
    instance: &Instance,
    model_id: &str,
) -> Result<Explained> {
    let set = perturb(task, settings, dataset_id, instance, "masks")?;
    let outputs = set.query_all(engine, model_id)?;
    let responses = Responses::build(task, &set, model_id, &outputs, Some(engine))?;
    let explanation = fit(task, settings, &set, &responses)?;
    Ok(Explained { set, responses, explanation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EngineOptions, MockDefinition, ModelRegistry};
    use crate::store::SampleStore;

    fn engine() -> QueryEngine {
        let mut reg = ModelRegistry::default();
        let weights = [("good".to_string(), 3.0), ("bad".to_string(), -3.0)].into_iter().collect();
        reg.register_mock("lin", MockDefinition::LinearSentiment { weights, bias: 0.0, labels: vec!["positive".into(), "negative".into()] })
            .unwrap();
        QueryEngine::new(reg, SampleStore::in_memory(), EngineOptions::default()).unwrap()
    }

    fn instance(text: &str) -> Instance {
        Instance { id: "i".into(), text: text.into(), gold: None }
    }

    #[test]
    fn word_perturbations_render_prompts() {
        let task = TaskSpec::new(TaskKind::Sentiment);
        let settings = ExplainSettings { n_samples: 10, ..Default::default() };
        let set = perturb(&task, &settings, "ds", &instance("a good film"), "masks").unwrap();
        assert!(set.exhaustive);
        assert_eq!(set.masks.len(), 8);
        let full = set.full_index().unwrap();
        assert_eq!(set.prompts[full], task.build_prompt("a good film"));
        let again = perturb(&task, &settings, "ds", &instance("a good film"), "masks").unwrap();
        assert_eq!(set, again);
    }

    #[test]
    fn shap_explanation_of_linear_mock() {
        let e = engine();
        let task = TaskSpec::new(TaskKind::Sentiment);
        let settings = ExplainSettings { n_samples: 100, ..Default::default() };
        let ex = explain_instance(&e, &task, &settings, "ds", &instance("a good film"), "lin").unwrap();
        let a = &ex.explanation.attributions[0];
        assert!(a.values[1] > 0.3);
        assert!(a.values[0].abs() < 1e-12 && a.values[2].abs() < 1e-12);
        assert_eq!(ex.explanation.prediction.as_deref(), Some("positive"));
        let sum = a.intercept + a.values.iter().sum::<f64>();
        assert!((sum - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-9);
        // Negative-class view flips the sign.
        assert_eq!(ex.explanation.for_label(&task, 1).values[1], -a.values[1]);
    }

    #[test]
    fn example_block_perturbations_keep_the_question() {
        let mut task = TaskSpec::new(TaskKind::MultipleChoice);
        task.icl_examples = vec!["E1".into(), "E2".into(), "E3".into()];
        let settings = ExplainSettings { segmentation: SegmentationMode::example_block(), n_samples: 10, ..Default::default() };
        let set = perturb(&task, &settings, "ds", &instance("Q?"), "masks").unwrap();
        assert_eq!(set.n(), 3);
        let m = Mask::new(vec![true, false, true]);
        let p = set.render(&task, &m).unwrap();
        assert!(p.contains("E1\n\nE3\n\nQ?"));
        assert!(!p.contains("E2"));
    }

    #[test]
    fn unparseable_outputs_are_counted() {
        let mut reg = ModelRegistry::default();
        reg.register_mock("odd", MockDefinition::Constant { output: "maybe".into() }).unwrap();
        let e = QueryEngine::new(reg, SampleStore::in_memory(), EngineOptions::default()).unwrap();
        let task = TaskSpec::new(TaskKind::Sentiment);
        let settings = ExplainSettings { n_samples: 10, ..Default::default() };
        let set = perturb(&task, &settings, "ds", &instance("a b"), "masks").unwrap();
        let outputs = set.query_all(&e, "odd").unwrap();
        let r = Responses::build(&task, &set, "odd", &outputs, None).unwrap();
        assert_eq!(r.unparseable, 4);
        assert_eq!(r.prediction.0, None);
        assert!(fit(&task, &settings, &set, &r).is_err());
    }
}
