//! Run configuration (JSON).
//!
//! Relative paths resolve against the directory holding the config file.
//! `task`, `models` and the dataset's instances may be given inline instead
//! of as paths.

use std::path::{Path, PathBuf};

use proxex_core::compression::{MdtaMode, DEFAULT_REPEATS, DEFAULT_THRESHOLD_FACTOR};
use proxex_core::fidelity::FidelityMetric;
use proxex_core::perturbation::{SamplingStrategy, DEFAULT_KERNEL_WIDTH, DEFAULT_SAMPLES};
use proxex_core::solvers::DEFAULT_RIDGE_LAMBDA;
use proxex_core::{Method, SegmentationMode};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::compress::CompressSettings;
use crate::datasets::{self, DatasetFormat, Instance};
use crate::error::{Error, Result};
use crate::eval::MatrixSettings;
use crate::explain::ExplainSettings;
use crate::model::{EngineOptions, ModelRegistry};
use crate::task::TaskSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source<T> {
    Path(PathBuf),
    Inline(T),
}

impl<T: DeserializeOwned + Clone> Source<T> {
    fn resolve(&self, base: &Path) -> Result<T> {
        match self {
            Source::Inline(v) => Ok(v.clone()),
            Source::Path(p) => {
                let path = base.join(p);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<DatasetFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<Vec<Instance>>,
    /// Keep only the first `limit` instances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    /// Defaults to every registered model.
    #[serde(default)]
    pub models: Vec<String>,
    #[serde(default = "default_metric")]
    pub metric: FidelityMetric,
    #[serde(default)]
    pub filtered: bool,
    #[serde(default)]
    pub fresh_eval: bool,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig { models: Vec::new(), metric: default_metric(), filtered: false, fresh_eval: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressConfig {
    #[serde(default = "default_threshold")]
    pub threshold_factor: f64,
    #[serde(default)]
    pub mdta_mode: MdtaMode,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub enumerate_orders: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

impl Default for CompressConfig {
    fn default() -> Self {
        CompressConfig {
            threshold_factor: default_threshold(),
            mdta_mode: MdtaMode::default(),
            repeats: default_repeats(),
            enumerate_orders: false,
            subject: None,
        }
    }
}

fn default_metric() -> FidelityMetric {
    FidelityMetric::Accuracy
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD_FACTOR
}
fn default_repeats() -> usize {
    DEFAULT_REPEATS
}
fn default_method() -> Method {
    Method::KernelShap
}
fn default_samples() -> usize {
    DEFAULT_SAMPLES
}
fn default_segmentation() -> String {
    "word".into()
}
fn default_lambda() -> f64 {
    DEFAULT_RIDGE_LAMBDA
}
fn default_width() -> f64 {
    DEFAULT_KERNEL_WIDTH
}
fn default_store() -> PathBuf {
    PathBuf::from("store.jsonl")
}
fn default_inflight() -> usize {
    8
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Source<TaskSpec>,
    pub models: Source<ModelRegistry>,
    pub dataset: DatasetConfig,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// `word`, `sentence` or `example-block`.
    #[serde(default = "default_segmentation")]
    pub segmentation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingStrategy>,
    #[serde(default = "default_lambda")]
    pub ridge_lambda: f64,
    #[serde(default = "default_width")]
    pub kernel_width: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proxy_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<Vec<String>>,
    #[serde(default)]
    pub matrix: MatrixConfig,
    #[serde(default)]
    pub compress: CompressConfig,

    #[serde(default = "default_store")]
    pub store: PathBuf,
    #[serde(default)]
    pub replay_only: bool,
    #[serde(default = "default_inflight")]
    pub max_inflight: usize,
    #[serde(default)]
    pub store_prompts: bool,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

/// The parts of a [`RunConfig`] that determine results. Execution details
/// (store location, replay mode, concurrency, output directory) are left out
/// so a replay reproduces the live run's reports byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub dataset_id: String,
    pub explain: ExplainSettings,
    pub proxy_model: Option<String>,
    pub target_model: Option<String>,
    pub instances: Option<Vec<String>>,
    pub matrix: MatrixConfig,
    pub compress: CompressConfig,
}

/// A config with every source loaded.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub task: TaskSpec,
    pub registry: ModelRegistry,
    pub instances: Vec<Instance>,
    pub explain: ExplainSettings,
    pub store_path: PathBuf,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((config, base))
    }

    pub fn segmentation_mode(&self, task: &TaskSpec) -> Result<SegmentationMode> {
        match SegmentationMode::parse(&self.segmentation) {
            Some(SegmentationMode::ExampleBlock { .. }) => {
                Ok(SegmentationMode::ExampleBlock { delimiter: task.example_delimiter.clone() })
            }
            Some(m) => Ok(m),
            None => Err(Error::Config(format!("unknown segmentation mode {:?}", self.segmentation))),
        }
    }

    pub fn resolve(self, base: &Path) -> Result<Resolved> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        if !(self.ridge_lambda >= 0.0) || !(self.kernel_width > 0.0) {
            return Err(Error::Config("ridge_lambda must be >= 0 and kernel_width > 0".into()));
        }
        let task = self.task.resolve(base)?;
        task.validate()?;
        let registry = self.models.resolve(base)?;
        registry.validate()?;
        let mut instances = match (&self.dataset.instances, &self.dataset.path) {
            (Some(list), None) => list.clone(),
            (None, Some(p)) => {
                let format = self.dataset.format.ok_or_else(|| Error::Config("dataset.format is required with a path".into()))?;
                datasets::load(&base.join(p), format)?
            }
            _ => return Err(Error::Config("dataset needs exactly one of path or instances".into())),
        };
        if let Some(limit) = self.dataset.limit {
            instances.truncate(limit);
        }
        if let Some(ids) = &self.instances {
            for id in ids {
                if !instances.iter().any(|i| &i.id == id) {
                    return Err(Error::Config(format!("instance {id} not in dataset {}", self.dataset.id)));
                }
            }
            instances.retain(|i| ids.contains(&i.id));
        }
        for id in [&self.proxy_model, &self.target_model].into_iter().flatten().chain(&self.matrix.models) {
            registry.get(id)?;
        }
        let explain = ExplainSettings {
            method: self.method,
            n_samples: self.n_samples,
            seed: self.seed,
            segmentation: self.segmentation_mode(&task)?,
            sampling: self.sampling,
            ridge_lambda: self.ridge_lambda,
            kernel_width: self.kernel_width,
        };
        Ok(Resolved {
            store_path: base.join(&self.store),
            out_dir: base.join(&self.out),
            config: self,
            task,
            registry,
            instances,
            explain,
        })
    }
}

impl Resolved {
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            task: self.task.clone(),
            dataset_id: self.config.dataset.id.clone(),
            explain: self.explain.clone(),
            proxy_model: self.config.proxy_model.clone(),
            target_model: self.config.target_model.clone(),
            instances: self.config.instances.clone(),
            matrix: self.config.matrix.clone(),
            compress: self.config.compress.clone(),
        }
    }

    pub fn engine_options(&self) -> EngineOptions {
        EngineOptions {
            replay_only: self.config.replay_only,
            max_inflight: self.config.max_inflight,
            store_prompts: self.config.store_prompts,
            default_seed: crate::explain::sub_seed(self.config.seed, "noisy-mocks"),
            ..EngineOptions::default()
        }
    }

    pub fn matrix_settings(&self) -> MatrixSettings {
        MatrixSettings {
            metric: self.config.matrix.metric,
            filtered: self.config.matrix.filtered,
            fresh_eval: self.config.matrix.fresh_eval,
        }
    }

    pub fn matrix_models(&self) -> Vec<String> {
        if self.config.matrix.models.is_empty() {
            self.registry.models.iter().map(|m| m.model_id.clone()).collect()
        } else {
            self.config.matrix.models.clone()
        }
    }

    pub fn compress_settings(&self) -> CompressSettings {
        let c = &self.config.compress;
        CompressSettings {
            threshold_factor: c.threshold_factor,
            mdta_mode: c.mdta_mode,
            repeats: c.repeats,
            enumerate_orders: c.enumerate_orders,
        }
    }

    /// The proxy model, else the target model.
    pub fn proxy(&self) -> Result<&str> {
        self.config
            .proxy_model
            .as_deref()
            .or(self.config.target_model.as_deref())
            .ok_or_else(|| Error::Config("config names neither proxy_model nor target_model".into()))
    }

    /// The target model, else the proxy model.
    pub fn target(&self) -> Result<&str> {
        self.config
            .target_model
            .as_deref()
            .or(self.config.proxy_model.as_deref())
            .ok_or_else(|| Error::Config("config names neither proxy_model nor target_model".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "task": {"kind": "sentiment"},
        "models": {"models": [{"model_id": "m", "endpoint": "mock:c"}], "mocks": {"c": {"kind": "constant", "output": "positive"}}},
        "dataset": {"id": "ds", "instances": [{"id": "a", "text": "good"}, {"id": "b", "text": "bad"}]},
        "proxy_model": "m"
    }"#;

    #[test]
    fn defaults_and_resolution() {
        let cfg: RunConfig = serde_json::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.n_samples, 1000);
        assert_eq!(cfg.method, Method::KernelShap);
        assert_eq!(cfg.max_inflight, 8);
        let r = cfg.resolve(Path::new("/tmp/x")).unwrap();
        assert_eq!(r.instances.len(), 2);
        assert_eq!(r.store_path, PathBuf::from("/tmp/x/store.jsonl"));
        assert_eq!(r.target().unwrap(), "m");
        assert_eq!(r.matrix_models(), vec!["m".to_string()]);
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg: RunConfig = serde_json::from_str(MINIMAL).unwrap();
        cfg.n_samples = 0;
        assert!(matches!(cfg.clone().resolve(Path::new(".")), Err(Error::Config(_))));
        cfg.n_samples = 10;
        cfg.segmentation = "paragraph".into();
        assert!(cfg.clone().resolve(Path::new(".")).is_err());
        cfg.segmentation = "word".into();
        cfg.proxy_model = Some("missing".into());
        assert!(matches!(cfg.clone().resolve(Path::new(".")), Err(Error::UnknownModel(_))));
        cfg.proxy_model = None;
        cfg.instances = Some(vec!["zzz".into()]);
        assert!(cfg.resolve(Path::new(".")).is_err());
        assert!(serde_json::from_str::<RunConfig>(&MINIMAL.replace("\"proxy_model\"", "\"proxy\"")).is_err());
    }

    #[test]
    fn file_sources_are_relative_to_the_config() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("task.json"), r#"{"kind": "sentiment"}"#).unwrap();
        std::fs::write(dir.path().join("data.tsv"), "sentence\tlabel\ngood\t1\n").unwrap();
        let cfg = MINIMAL
            .replace(r#"{"kind": "sentiment"}"#, r#""task.json""#)
            .replace(
                r#"{"id": "ds", "instances": [{"id": "a", "text": "good"}, {"id": "b", "text": "bad"}]}"#,
                r#"{"id": "sst2", "path": "data.tsv", "format": "sst2-tsv"}"#,
            );
        let path = dir.path().join("run.json");
        std::fs::write(&path, cfg).unwrap();
        let (cfg, base) = RunConfig::load(&path).unwrap();
        let r = cfg.resolve(&base).unwrap();
        assert_eq!(r.instances[0].gold.as_deref(), Some("positive"));
    }
}
