//! Fidelity evaluation: surrogate agreement, AOPC and the cross-model matrix.

use std::collections::BTreeMap;

use proxex_core::fidelity::{
    agreement_filter, aopc, argmax_accuracy, binary_accuracy, corpus_aopc, relative_fidelity, surrogate_mse, AopcCurve,
    FidelityMetric,
};
use proxex_core::Mask;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Instance;
use crate::error::{Error, Result};
use crate::explain::{fit, perturb, ExplainSettings, Explanation, PerturbationSet, Prediction, Responses};
use crate::model::QueryEngine;
use crate::task::{prob_of_label, score_generation, TaskKind, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub proxy_model_id: String,
    pub target_model_id: String,
    pub metric: FidelityMetric,
    pub value: f64,
    pub n_instances: usize,
    /// Agreement filter applied.
    pub filtered: bool,
    /// Evaluated on a fresh mask draw instead of the fitting samples.
    pub fresh_eval: bool,
}

/// Fidelity of `proxy`'s surrogate to `target`'s answers on `masks`.
///
/// Accuracy thresholds (sentiment) or argmaxes (multiple choice) the
/// surrogate; unparseable target outputs count as disagreements. MSE compares
/// surrogate scores with the target's response values over parseable masks.
pub fn surrogate_fidelity(
    task: &TaskSpec,
    proxy: &Explanation,
    masks: &[Mask],
    target: &Responses,
    metric: FidelityMetric,
) -> Result<f64> {
    match (metric, task.kind) {
        (FidelityMetric::Accuracy, TaskKind::Sentiment) => {
            let positive: Vec<Option<bool>> = target.labels.iter().map(|l| l.map(|i| i == 0)).collect();
            Ok(binary_accuracy(&proxy.attributions[0], masks, &positive, task.response_coding)?)
        }
        (FidelityMetric::Accuracy, TaskKind::MultipleChoice) => {
            Ok(argmax_accuracy(&proxy.attributions, masks, &target.labels)?)
        }
        (FidelityMetric::Accuracy, TaskKind::Generation) => {
            Err(Error::Config("accuracy is undefined for generation tasks; use mse".into()))
        }
        (FidelityMetric::Mse, _) => {
            let mut total = 0.0;
            for (d, attr) in proxy.attributions.iter().enumerate() {
                let (m, y): (Vec<Mask>, Vec<f64>) = masks
                    .iter()
                    .zip(&target.values)
                    .filter_map(|(m, v)| v.as_ref().map(|v| (m.clone(), v[d])))
                    .unzip();
                total += surrogate_mse(attr, &m, &y)?;
            }
            Ok(total / proxy.attributions.len() as f64)
        }
        (FidelityMetric::Aopc, _) => Err(Error::Config("AOPC needs model access; use instance_aopc".into())),
    }
}

/// AOPC of `explanation` against `target_model`, for the label the target
/// predicts on the unperturbed input.
pub fn instance_aopc(
    engine: &QueryEngine,
    task: &TaskSpec,
    set: &PerturbationSet,
    explanation: &Explanation,
    target_model: &str,
) -> Result<AopcCurve> {
    let full_mask = Mask::full(set.n());
    let full = set.query(engine, target_model, task, &full_mask)?;
    match task.kind {
        TaskKind::Generation => {
            let reference = task.reference_output.clone().unwrap_or_else(|| full.text.trim().to_string());
            let score = |text: &str| -> Result<f64> {
                Ok(score_generation(text.trim(), &reference, task.scorer, Some(engine))?.value)
            };
            let p_full = score(&full.text)?;
            let attr = explanation.for_label(task, 0);
            aopc(&attr.values, p_full, |m| score(&set.query(engine, target_model, task, m)?.text))
        }
        _ => {
            let y = crate::task::parse_label(task.labels(), &full.text)?;
            let attr = explanation.for_label(task, y);
            let p_full = prob_of_label(task, &full, y);
            aopc(&attr.values, p_full, |m| Ok(prob_of_label(task, &set.query(engine, target_model, task, m)?, y)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSettings {
    pub metric: FidelityMetric,
    pub filtered: bool,
    pub fresh_eval: bool,
}

impl Default for MatrixSettings {
    fn default() -> Self {
        MatrixSettings { metric: FidelityMetric::Accuracy, filtered: false, fresh_eval: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub proxy_model_id: String,
    pub target_model_id: String,
    pub report: Option<FidelityReport>,
    /// Cell value over its column's diagonal value.
    pub relative: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitFailure {
    pub unit: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityMatrix {
    /// Row (proxy) and column (target) order.
    pub model_ids: Vec<String>,
    pub metric: FidelityMetric,
    pub filtered: bool,
    pub fresh_eval: bool,
    /// Row-major.
    pub cells: Vec<MatrixCell>,
    /// Mean per-instance variance of each model's response over its
    /// perturbations.
    pub output_variance: BTreeMap<String, Option<f64>>,
    pub unparseable: BTreeMap<String, usize>,
    pub failures: Vec<UnitFailure>,
}

impl FidelityMatrix {
    pub fn cell(&self, proxy: &str, target: &str) -> Option<&MatrixCell> {
        self.cells.iter().find(|c| c.proxy_model_id == proxy && c.target_model_id == target)
    }

    pub fn value(&self, proxy: &str, target: &str) -> Option<f64> {
        self.cell(proxy, target).and_then(|c| c.report.as_ref()).map(|r| r.value)
    }
}

/// Per-instance state shared by every cell.
struct InstanceRun {
    id: String,
    set: PerturbationSet,
    eval_masks: Vec<Mask>,
    explanations: BTreeMap<String, Explanation>,
    eval_responses: BTreeMap<String, Responses>,
}

#[allow(clippy::too_many_arguments)]
fn run_instance(
    engine: &QueryEngine,
    task: &TaskSpec,
    settings: &ExplainSettings,
    dataset_id: &str,
    instance: &Instance,
    models: &[String],
    fresh_eval: bool,
    failures: &mut Vec<UnitFailure>,
) -> Result<InstanceRun> {
    let set = perturb(task, settings, dataset_id, instance, "masks")?;
    let eval_set = if fresh_eval { Some(perturb(task, settings, dataset_id, instance, "eval-masks")?) } else { None };
    let mut run = InstanceRun {
        id: instance.id.clone(),
        eval_masks: eval_set.as_ref().unwrap_or(&set).masks.clone(),
        set,
        explanations: BTreeMap::new(),
        eval_responses: BTreeMap::new(),
    };
    for model in models {
        let outcome = (|| -> Result<()> {
            let outputs = run.set.query_all(engine, model)?;
            let responses = Responses::build(task, &run.set, model, &outputs, Some(engine))?;
            match fit(task, settings, &run.set, &responses) {
                Ok(ex) => {
                    run.explanations.insert(model.clone(), ex);
                }
                Err(e) => failures.push(UnitFailure { unit: format!("{}/{model}/fit", instance.id), error: e.to_string() }),
            }
            let eval_responses = match &eval_set {
                Some(es) => {
                    let outputs = es.query_all(engine, model)?;
                    Responses::build(task, es, model, &outputs, Some(engine))?
                }
                None => responses,
            };
            run.eval_responses.insert(model.clone(), eval_responses);
            Ok(())
        })();
        if let Err(e) = outcome {
            failures.push(UnitFailure { unit: format!("{}/{model}", instance.id), error: e.to_string() });
        }
    }
    Ok(run)
}

/// Every model explains every other model on shared perturbations.
///
/// Row `r`, column `c` is the fidelity of `r`'s surrogate to `c`'s outputs,
/// averaged over instances where both are available (and, when filtered,
/// where `r` and `c` agree on the unperturbed input). The diagonal holds
/// oracle explanations.
pub fn fidelity_matrix(
    engine: &QueryEngine,
    task: &TaskSpec,
    settings: &ExplainSettings,
    dataset_id: &str,
    instances: &[Instance],
    models: &[String],
    matrix: &MatrixSettings,
) -> Result<FidelityMatrix> {
    if models.is_empty() {
        return Err(Error::Config("fidelity matrix needs at least one model".into()));
    }
    for m in models {
        engine.spec(m)?;
    }
    let per_instance: Vec<(Result<InstanceRun>, Vec<UnitFailure>)> = instances
        .par_iter()
        .map(|inst| {
            let mut failures = Vec::new();
            let run = run_instance(engine, task, settings, dataset_id, inst, models, matrix.fresh_eval, &mut failures);
            (run, failures)
        })
        .collect();
    let mut failures = Vec::new();
    let mut runs = Vec::new();
    for ((run, fs), inst) in per_instance.into_iter().zip(instances) {
        failures.extend(fs);
        match run {
            Ok(r) => runs.push(r),
            Err(e) => failures.push(UnitFailure { unit: inst.id.clone(), error: e.to_string() }),
        }
    }

    let mut output_variance = BTreeMap::new();
    let mut unparseable = BTreeMap::new();
    for m in models {
        let vars: Vec<f64> = runs.iter().filter_map(|r| r.eval_responses.get(m).and_then(Responses::variance)).collect();
        let mean = (!vars.is_empty()).then(|| vars.iter().sum::<f64>() / vars.len() as f64);
        output_variance.insert(m.clone(), mean);
        unparseable.insert(m.clone(), runs.iter().filter_map(|r| r.eval_responses.get(m)).map(|r| r.unparseable).sum());
    }

    let pairs: Vec<(&String, &String)> = models.iter().flat_map(|r| models.iter().map(move |c| (r, c))).collect();
    let values: Vec<Result<(f64, usize)>> =
        pairs.par_iter().map(|(r, c)| cell_value(engine, task, &runs, r, c, matrix)).collect();

    let mut cells = Vec::with_capacity(pairs.len());
    for ((r, c), v) in pairs.iter().zip(&values) {
        let (report, error) = match v {
            Ok((value, n)) => (
                Some(FidelityReport {
                    proxy_model_id: (*r).clone(),
                    target_model_id: (*c).clone(),
                    metric: matrix.metric,
                    value: *value,
                    n_instances: *n,
                    filtered: matrix.filtered,
                    fresh_eval: matrix.fresh_eval,
                }),
                None,
            ),
            Err(e) => (None, Some(e.to_string())),
        };
        cells.push(MatrixCell { proxy_model_id: (*r).clone(), target_model_id: (*c).clone(), report, relative: None, error });
    }
    let diagonal: BTreeMap<String, f64> = cells
        .iter()
        .filter(|c| c.proxy_model_id == c.target_model_id)
        .filter_map(|c| c.report.as_ref().map(|r| (c.target_model_id.clone(), r.value)))
        .collect();
    for cell in &mut cells {
        if let (Some(rep), Some(d)) = (&cell.report, diagonal.get(&cell.target_model_id)) {
            cell.relative = relative_fidelity(rep.value, *d);
        }
    }
    Ok(FidelityMatrix {
        model_ids: models.to_vec(),
        metric: matrix.metric,
        filtered: matrix.filtered,
        fresh_eval: matrix.fresh_eval,
        cells,
        output_variance,
        unparseable,
        failures,
    })
}

fn cell_value(
    engine: &QueryEngine,
    task: &TaskSpec,
    runs: &[InstanceRun],
    proxy: &str,
    target: &str,
    matrix: &MatrixSettings,
) -> Result<(f64, usize)> {
    let usable: Vec<&InstanceRun> = runs
        .iter()
        .filter(|r| r.explanations.contains_key(proxy) && r.eval_responses.contains_key(target) && r.eval_responses.contains_key(proxy))
        .collect();
    let kept: Vec<&InstanceRun> = if matrix.filtered {
        let ids: Vec<String> = usable.iter().map(|r| r.id.clone()).collect();
        let preds = |model: &str| -> BTreeMap<String, Prediction> {
            usable.iter().map(|r| (r.id.clone(), r.eval_responses[model].prediction.clone())).collect()
        };
        let survivors = agreement_filter(&ids, &preds(proxy), &preds(target))?;
        usable.into_iter().filter(|r| survivors.contains(&r.id)).collect()
    } else {
        usable
    };
    if kept.is_empty() {
        return Err(Error::Core(proxex_core::Error::NoSamples));
    }
    let mut values = Vec::with_capacity(kept.len());
    for run in &kept {
        let explanation = &run.explanations[proxy];
        let v = match matrix.metric {
            FidelityMetric::Aopc => instance_aopc(engine, task, &run.set, explanation, target)?.aopc,
            metric => surrogate_fidelity(task, explanation, &run.eval_masks, &run.eval_responses[target], metric)?,
        };
        values.push(v);
    }
    Ok((values.iter().sum::<f64>() / values.len() as f64, kept.len()))
}

/// Per-instance AOPC of one model's explanations evaluated on another model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AopcEntry {
    pub instance_id: String,
    pub aopc: f64,
    pub drops: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AopcReport {
    pub proxy_model_id: String,
    pub target_model_id: String,
    pub instances: Vec<AopcEntry>,
    pub corpus_aopc: Option<f64>,
    pub failures: Vec<UnitFailure>,
}

pub fn aopc_report(
    engine: &QueryEngine,
    task: &TaskSpec,
    settings: &ExplainSettings,
    dataset_id: &str,
    instances: &[Instance],
    proxy: &str,
    target: &str,
) -> Result<AopcReport> {
    engine.spec(proxy)?;
    engine.spec(target)?;
    let results: Vec<Result<AopcEntry>> = instances
        .par_iter()
        .map(|inst| {
            let ex = crate::explain::explain_instance(engine, task, settings, dataset_id, inst, proxy)?;
            let curve = instance_aopc(engine, task, &ex.set, &ex.explanation, target)?;
            Ok(AopcEntry { instance_id: inst.id.clone(), aopc: curve.aopc, drops: curve.drops })
        })
        .collect();
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (r, inst) in results.into_iter().zip(instances) {
        match r {
            Ok(e) => entries.push(e),
            Err(e) => failures.push(UnitFailure { unit: inst.id.clone(), error: e.to_string() }),
        }
    }
    let per: Vec<f64> = entries.iter().map(|e| e.aopc).collect();
    Ok(AopcReport {
        proxy_model_id: proxy.to_string(),
        target_model_id: target.to_string(),
        corpus_aopc: corpus_aopc(&per).ok(),
        instances: entries,
        failures,
    })
}
