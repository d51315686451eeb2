//! Attribution-guided deletion of in-context examples.

use proxex_core::compression::{
    all_orders, ascending_order, deletion_curve, random_orders, removal_ratio, CompressionRun, DeletionStrategy, MdtaMode,
    DEFAULT_REPEATS, DEFAULT_THRESHOLD_FACTOR,
};
use proxex_core::{Mask, Method, SegmentationMode};
use serde::{Deserialize, Serialize};

use crate::datasets::Instance;
use crate::error::{Error, Result};
use crate::explain::{collect_outputs, explain_instance, sub_seed, ExplainSettings};
use crate::model::{QueryContext, QueryEngine};
use crate::task::{parse_label, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressSettings {
    pub threshold_factor: f64,
    pub mdta_mode: MdtaMode,
    pub repeats: usize,
    /// Score every ordering of the examples instead of `repeats` random ones.
    pub enumerate_orders: bool,
}

impl Default for CompressSettings {
    fn default() -> Self {
        CompressSettings {
            threshold_factor: DEFAULT_THRESHOLD_FACTOR,
            mdta_mode: MdtaMode::MaxK,
            repeats: DEFAULT_REPEATS,
            enumerate_orders: false,
        }
    }
}

/// Accuracy of `target` on `eval` with only the `present` examples in the
/// prompt. Unparseable answers count as wrong.
pub fn accuracy_with(
    engine: &QueryEngine,
    task: &TaskSpec,
    dataset_id: &str,
    eval: &[Instance],
    target: &str,
    present: &[bool],
) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::Core(proxex_core::Error::NoSamples));
    }
    let kept: Vec<&str> = task.icl_examples.iter().zip(present).filter(|(_, p)| **p).map(|(e, _)| e.as_str()).collect();
    let block = kept.join(&task.example_delimiter);
    let mask = Mask::new(present.to_vec()).to_bitstring();
    let batch: Vec<(String, QueryContext)> = eval
        .iter()
        .map(|inst| {
            let ctx = QueryContext {
                dataset_id: dataset_id.to_string(),
                instance_id: inst.id.clone(),
                segmentation_mode: SegmentationMode::example_block().name().to_string(),
                mask: mask.clone(),
            };
            (task.render(&block, &inst.text), ctx)
        })
        .collect();
    let outputs = collect_outputs(target, engine.query_all(target, &batch))?;
    let correct = outputs
        .iter()
        .zip(eval)
        .filter(|(out, inst)| {
            let gold = inst.gold.as_deref().and_then(|g| parse_label(task.labels(), g).ok());
            gold.is_some() && parse_label(task.labels(), &out.text).ok() == gold
        })
        .count();
    Ok(correct as f64 / eval.len() as f64)
}

/// Runs every deletion order and averages the curves.
#[allow(clippy::too_many_arguments)]
pub fn compress_with_orders(
    engine: &QueryEngine,
    task: &TaskSpec,
    dataset_id: &str,
    eval: &[Instance],
    target: &str,
    orders: &[Vec<usize>],
    strategy: DeletionStrategy,
    settings: &CompressSettings,
    subject_id: &str,
) -> Result<CompressionRun> {
    if task.icl_examples.is_empty() {
        return Err(Error::Core(proxex_core::Error::NoExamples));
    }
    let curves = orders
        .iter()
        .map(|order| deletion_curve(order, |present| accuracy_with(engine, task, dataset_id, eval, target, present)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CompressionRun::from_curves(subject_id, &curves, strategy, settings.threshold_factor, settings.mdta_mode)?)
}

/// Deletes examples in ascending order of `attribution`.
#[allow(clippy::too_many_arguments)]
pub fn compress(
    engine: &QueryEngine,
    task: &TaskSpec,
    dataset_id: &str,
    eval: &[Instance],
    target: &str,
    attribution: &[f64],
    settings: &CompressSettings,
    subject_id: &str,
) -> Result<CompressionRun> {
    let m = task.icl_examples.len();
    if m == 0 {
        return Err(Error::Core(proxex_core::Error::NoExamples));
    }
    if attribution.len() != m {
        return Err(Error::Core(proxex_core::Error::MaskShape { expected: m, got: attribution.len() }));
    }
    let order = ascending_order(attribution);
    compress_with_orders(engine, task, dataset_id, eval, target, &[order], DeletionStrategy::AttributionAsc, settings, subject_id)
}

/// Uniformly random deletion orders, or all of them when enumerating.
#[allow(clippy::too_many_arguments)]
pub fn random_baseline(
    engine: &QueryEngine,
    task: &TaskSpec,
    dataset_id: &str,
    eval: &[Instance],
    target: &str,
    settings: &CompressSettings,
    seed: u64,
    subject_id: &str,
) -> Result<CompressionRun> {
    let m = task.icl_examples.len();
    if m == 0 {
        return Err(Error::Core(proxex_core::Error::NoExamples));
    }
    let orders = if settings.enumerate_orders {
        all_orders(m)
    } else {
        if settings.repeats == 0 {
            return Err(Error::Config("random baseline needs at least one repeat".into()));
        }
        random_orders(m, settings.repeats, sub_seed(seed, "random-baseline"))
    };
    compress_with_orders(engine, task, dataset_id, eval, target, &orders, DeletionStrategy::Random, settings, subject_id)
}

/// Mean example-level Kernel SHAP attribution of `model` over `eval`, each
/// taken towards the instance's gold label (the model's own prediction when
/// there is no parseable gold label).
pub fn example_attribution(
    engine: &QueryEngine,
    task: &TaskSpec,
    settings: &ExplainSettings,
    dataset_id: &str,
    eval: &[Instance],
    model: &str,
) -> Result<Vec<f64>> {
    let m = task.icl_examples.len();
    if m == 0 {
        return Err(Error::Core(proxex_core::Error::NoExamples));
    }
    let settings = ExplainSettings {
        method: Method::KernelShap,
        segmentation: SegmentationMode::ExampleBlock { delimiter: task.example_delimiter.clone() },
        ..settings.clone()
    };
    let mut sum = vec![0.0; m];
    for inst in eval {
        let ex = explain_instance(engine, task, &settings, dataset_id, inst, model)?;
        let label = inst
            .gold
            .as_deref()
            .and_then(|g| parse_label(task.labels(), g).ok())
            .or_else(|| ex.responses.predicted_label(&ex.set))
            .unwrap_or(0);
        for (s, v) in sum.iter_mut().zip(&ex.explanation.for_label(task, label).values) {
            *s += v;
        }
    }
    Ok(sum.into_iter().map(|s| s / eval.len().max(1) as f64).collect())
}

/// One subject: oracle-guided, proxy-guided and random deletion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub subject_id: String,
    pub target_model_id: String,
    pub proxy_model_id: Option<String>,
    pub oracle_attribution: Vec<f64>,
    pub oracle: CompressionRun,
    pub proxy_attribution: Option<Vec<f64>>,
    pub proxy: Option<CompressionRun>,
    pub random: CompressionRun,
    /// Percent of the oracle-guided MDTA; `None` when that MDTA is 0.
    pub proxy_removal_ratio: Option<f64>,
    pub random_removal_ratio: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn compression_report(
    engine: &QueryEngine,
    task: &TaskSpec,
    explain: &ExplainSettings,
    settings: &CompressSettings,
    dataset_id: &str,
    eval: &[Instance],
    target: &str,
    proxy: Option<&str>,
    subject_id: &str,
) -> Result<CompressionReport> {
    let oracle_attribution = example_attribution(engine, task, explain, dataset_id, eval, target)?;
    let oracle = compress(engine, task, dataset_id, eval, target, &oracle_attribution, settings, subject_id)?;
    let (proxy_attribution, proxy_run) = match proxy {
        Some(p) => {
            let attr = example_attribution(engine, task, explain, dataset_id, eval, p)?;
            let run = compress(engine, task, dataset_id, eval, target, &attr, settings, subject_id)?;
            (Some(attr), Some(run))
        }
        None => (None, None),
    };
    let random = random_baseline(engine, task, dataset_id, eval, target, settings, explain.seed, subject_id)?;
    let ratio = |run: &CompressionRun| removal_ratio(run.mdta, oracle.mdta).ok();
    Ok(CompressionReport {
        subject_id: subject_id.to_string(),
        target_model_id: target.to_string(),
        proxy_model_id: proxy.map(str::to_string),
        proxy_removal_ratio: proxy_run.as_ref().and_then(ratio),
        random_removal_ratio: ratio(&random),
        oracle_attribution,
        oracle,
        proxy_attribution,
        proxy: proxy_run,
        random,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EngineOptions, MockDefinition, ModelRegistry};
    use crate::store::SampleStore;
    use crate::task::TaskKind;

    fn setup(table: &[(&str, &str)], features: &[&str]) -> (QueryEngine, TaskSpec, Vec<Instance>) {
        let mut reg = ModelRegistry::default();
        reg.register_mock(
            "mc",
            MockDefinition::ChoiceTable {
                features: features.iter().map(|s| s.to_string()).collect(),
                table: table.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
                default: "C".into(),
            },
        )
        .unwrap();
        let engine = QueryEngine::new(reg, SampleStore::in_memory(), EngineOptions::default()).unwrap();
        let mut task = TaskSpec::new(TaskKind::MultipleChoice);
        task.icl_examples = (1..=5).map(|i| format!("Example ex-{i}\nAnswer: B")).collect();
        let eval = (0..4).map(|i| Instance { id: format!("q{i}"), text: format!("Question {i}?"), gold: Some("B".into()) }).collect();
        (engine, task, eval)
    }

    #[test]
    fn attribution_guided_mdta() {
        let (e, task, eval) = setup(&[("11", "B")], &["ex-3", "ex-5"]);
        let settings = CompressSettings::default();
        let run = compress(&e, &task, "ds", &eval, "mc", &[0.0, 0.1, 0.9, 0.05, 0.8], &settings, "s").unwrap();
        assert_eq!(run.acc_curve, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(run.mdta, 3.0);
    }

    #[test]
    fn model_ignoring_examples_keeps_everything() {
        let (e, task, eval) = setup(&[("0", "B"), ("1", "B")], &["never-present"]);
        let settings = CompressSettings { repeats: 4, ..Default::default() };
        let run = random_baseline(&e, &task, "ds", &eval, "mc", &settings, 1, "s").unwrap();
        assert_eq!(run.mdta, 5.0);
        assert_eq!(run.repeats, 4);
    }

    #[test]
    fn oracle_attribution_finds_the_needed_examples() {
        let (e, task, eval) = setup(&[("11", "B")], &["ex-3", "ex-5"]);
        let explain = ExplainSettings { n_samples: 64, ..Default::default() };
        let attr = example_attribution(&e, &task, &explain, "ds", &eval, "mc").unwrap();
        assert!((attr[2] - 0.5).abs() < 1e-9 && (attr[4] - 0.5).abs() < 1e-9);
        assert!(attr[0].abs() < 1e-9 && attr[1].abs() < 1e-9 && attr[3].abs() < 1e-9);
        let report =
            compression_report(&e, &task, &explain, &CompressSettings::default(), "ds", &eval, "mc", None, "s").unwrap();
        assert_eq!(report.oracle.mdta, 3.0);
        assert!(report.random.mdta < 3.0);
    }

    #[test]
    fn no_examples() {
        let (e, mut task, eval) = setup(&[], &[]);
        task.icl_examples.clear();
        assert!(matches!(
            compress(&e, &task, "ds", &eval, "mc", &[], &CompressSettings::default(), "s"),
            Err(Error::Core(proxex_core::Error::NoExamples))
        ));
    }
}
