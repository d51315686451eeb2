//! Command-line entry points.
//!
//! Exit codes: 0 on success, 1 on configuration or fatal errors, 2 when some
//! units of work (instances, matrix cells, subjects) failed. Failed units are
//! listed in `<out>/failures.json`; live spend and cache statistics go to
//! `<out>/session.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use proxex_core::cost::default_pricing;
use proxex_core::Method;
use rayon::prelude::*;
use serde::Serialize;

use crate::compress::compression_report;
use crate::config::{ExperimentConfig, Resolved, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{aopc_report, fidelity_matrix, UnitFailure};
use crate::explain::{explain_instance, sub_seed, Explanation};
use crate::export::{compression_csv, matrix_csv, matrix_svg, write_atomic, write_json};
use crate::model::{CostLedger, LedgerSnapshot, ModelRegistry, QueryEngine};
use crate::store::{import_release, Manifest, SampleStore};

#[derive(Debug, Parser)]
#[command(name = "proxex", version, about = "Proxy-model explanations for language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// `lime` or `kernel-shap`.
    #[arg(long)]
    pub method: Option<String>,
    /// Perturbation samples per instance.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `word`, `sentence` or `example-block`.
    #[arg(long)]
    pub segmentation: Option<String>,
    /// Sample store (JSONL).
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Answer every query from the store; never contact a model.
    #[arg(long)]
    pub replay_only: bool,
    /// In-flight request cap per endpoint.
    #[arg(long)]
    pub max_inflight: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit proxy explanations and write one attribution file per instance.
    Explain {
        #[command(flatten)]
        run: RunArgs,
        /// Restrict to these instance ids (comma separated).
        #[arg(long, value_delimiter = ',')]
        instances: Vec<String>,
    },
    /// Cross-model fidelity matrix (CSV, JSON, SVG).
    Matrix {
        #[command(flatten)]
        run: RunArgs,
    },
    /// AOPC of proxy explanations on the target model.
    Aopc {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Attribution-guided in-context example deletion.
    Compress {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Price the queries recorded in a store.
    Cost {
        #[arg(long)]
        store: PathBuf,
        /// Optional run configuration supplying model prices.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a released sample file against its manifest.
    Import {
        #[arg(long)]
        release: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Append the validated records to this store.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failed units of a finished command.
#[derive(Debug, Default)]
pub struct Outcome {
    pub failures: Vec<UnitFailure>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            2
        }
    }
}

#[derive(Serialize)]
struct Report<'a, T> {
    command: &'a str,
    config: &'a ExperimentConfig,
    seeds: BTreeMap<&'a str, u64>,
    /// Token usage of every distinct record the result depends on.
    usage: LedgerSnapshot,
    failures: &'a [UnitFailure],
    result: T,
}

#[derive(Serialize)]
struct Session {
    replay_only: bool,
    live_spend: LedgerSnapshot,
    cache_hits: u64,
    live_queries: u64,
    store_records: usize,
    store_corrupt_lines: usize,
}

struct Context {
    resolved: Resolved,
    experiment: ExperimentConfig,
    engine: QueryEngine,
}

fn prepare(args: &RunArgs) -> Result<Context> {
    let (mut config, base) = RunConfig::load(&args.config)?;
    if let Some(m) = &args.method {
        config.method = Method::parse(m).ok_or_else(|| Error::Config(format!("unknown method {m:?}")))?;
    }
    if let Some(n) = args.samples {
        config.n_samples = n;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(s) = &args.segmentation {
        config.segmentation = s.clone();
    }
    if let Some(n) = args.max_inflight {
        config.max_inflight = n;
    }
    config.replay_only |= args.replay_only;
    let mut resolved = config.resolve(&base)?;
    if let Some(p) = &args.store {
        resolved.store_path = p.clone();
    }
    if let Some(p) = &args.out {
        resolved.out_dir = p.clone();
    }
    let store = if resolved.config.replay_only {
        SampleStore::open_read_only(&resolved.store_path)?
    } else {
        SampleStore::open(&resolved.store_path)?
    };
    if store.corrupt_lines() > 0 {
        log::warn!("{}: skipped {} corrupt line(s)", resolved.store_path.display(), store.corrupt_lines());
    }
    let engine = QueryEngine::new(resolved.registry.clone(), store, resolved.engine_options())?;
    let experiment = resolved.experiment();
    Ok(Context { resolved, experiment, engine })
}

impl Context {
    fn out(&self, name: &str) -> PathBuf {
        self.resolved.out_dir.join(name)
    }

    fn report<T: Serialize>(&self, command: &str, failures: &[UnitFailure], result: T) -> Result<Vec<u8>> {
        let seed = self.resolved.config.seed;
        let seeds = [("run", seed), ("noisy_mocks", sub_seed(seed, "noisy-mocks")), ("random_baseline", sub_seed(seed, "random-baseline"))]
            .into_iter()
            .collect();
        let report =
            Report { command, config: &self.experiment, seeds, usage: self.engine.consumed_usage(), failures, result };
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        Ok(text.into_bytes())
    }

    fn finish(&self, failures: Vec<UnitFailure>) -> Result<Outcome> {
        write_json(&self.out("failures.json"), &failures)?;
        let store = self.engine.store();
        let session = Session {
            replay_only: self.resolved.config.replay_only,
            live_spend: self.engine.ledger().snapshot(),
            cache_hits: self.engine.cache_hits(),
            live_queries: self.engine.live_queries(),
            store_records: store.len(),
            store_corrupt_lines: store.corrupt_lines(),
        };
        drop(store);
        write_json(&self.out("session.json"), &session)?;
        for f in &failures {
            eprintln!("failed: {}: {}", f.unit, f.error);
        }
        Ok(Outcome { failures })
    }
}

fn file_name(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' }).collect()
}

#[derive(Serialize)]
struct ExplainEntry {
    instance_id: String,
    file: String,
    prediction: Option<String>,
}

fn cmd_explain(args: &RunArgs, only: &[String]) -> Result<Outcome> {
    let ctx = prepare(args)?;
    let r = &ctx.resolved;
    let proxy = r.proxy()?;
    let target = r.target()?;
    let mut instances = r.instances.clone();
    if !only.is_empty() {
        for id in only {
            if !instances.iter().any(|i| &i.id == id) {
                return Err(Error::Config(format!("instance {id} not in dataset")));
            }
        }
        instances.retain(|i| only.contains(&i.id));
    }
    let results: Vec<Result<Explanation>> = instances
        .par_iter()
        .map(|inst| {
            let mut ex = explain_instance(&ctx.engine, &r.task, &r.explain, &r.config.dataset.id, inst, proxy)?.explanation;
            ex.attributions.iter_mut().for_each(|a| a.target_model_id = target.to_string());
            Ok(ex)
        })
        .collect();
    let mut failures = Vec::new();
    let mut entries = Vec::new();
    for (res, inst) in results.into_iter().zip(&instances) {
        match res {
            Ok(ex) => {
                let file = format!("attributions/{}.json", file_name(&inst.id));
                write_json(&ctx.out(&file), &ex)?;
                entries.push(ExplainEntry { instance_id: inst.id.clone(), file, prediction: ex.prediction });
            }
            Err(e) => failures.push(UnitFailure { unit: inst.id.clone(), error: e.to_string() }),
        }
    }
    write_atomic(&ctx.out("explain.json"), &ctx.report("explain", &failures, &entries)?)?;
    ctx.finish(failures)
}

fn cmd_matrix(args: &RunArgs) -> Result<Outcome> {
    let ctx = prepare(args)?;
    let r = &ctx.resolved;
    let matrix = fidelity_matrix(
        &ctx.engine,
        &r.task,
        &r.explain,
        &r.config.dataset.id,
        &r.instances,
        &r.matrix_models(),
        &r.matrix_settings(),
    )?;
    let mut failures = matrix.failures.clone();
    for cell in &matrix.cells {
        if let Some(e) = &cell.error {
            failures.push(UnitFailure { unit: format!("cell {}/{}", cell.proxy_model_id, cell.target_model_id), error: e.clone() });
        }
    }
    write_atomic(&ctx.out("matrix.json"), &ctx.report("matrix", &failures, &matrix)?)?;
    write_atomic(&ctx.out("matrix.csv"), &matrix_csv(&matrix)?)?;
    write_atomic(&ctx.out("matrix.svg"), matrix_svg(&matrix).as_bytes())?;
    ctx.finish(failures)
}

fn cmd_aopc(args: &RunArgs) -> Result<Outcome> {
    let ctx = prepare(args)?;
    let r = &ctx.resolved;
    let report = aopc_report(&ctx.engine, &r.task, &r.explain, &r.config.dataset.id, &r.instances, r.proxy()?, r.target()?)?;
    let failures = report.failures.clone();
    write_atomic(&ctx.out("aopc.json"), &ctx.report("aopc", &failures, &report)?)?;
    ctx.finish(failures)
}

fn cmd_compress(args: &RunArgs) -> Result<Outcome> {
    let ctx = prepare(args)?;
    let r = &ctx.resolved;
    let target = r.target()?;
    let proxy = r.config.proxy_model.as_deref().filter(|p| *p != target);
    let subject = r.config.compress.subject.clone().unwrap_or_else(|| r.config.dataset.id.clone());
    let mut failures = Vec::new();
    let reports = match compression_report(
        &ctx.engine,
        &r.task,
        &r.explain,
        &r.compress_settings(),
        &r.config.dataset.id,
        &r.instances,
        target,
        proxy,
        &subject,
    ) {
        Ok(rep) => vec![rep],
        Err(e) => {
            failures.push(UnitFailure { unit: subject.clone(), error: e.to_string() });
            Vec::new()
        }
    };
    write_atomic(&ctx.out("compression.json"), &ctx.report("compress", &failures, &reports)?)?;
    write_atomic(&ctx.out("compression.csv"), &compression_csv(&reports)?)?;
    ctx.finish(failures)
}

#[derive(Serialize)]
struct CostReport {
    store: String,
    records: usize,
    cost: LedgerSnapshot,
}

fn cmd_cost(store: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<Outcome> {
    let registry = match config {
        Some(path) => {
            let (cfg, base) = RunConfig::load(path)?;
            cfg.resolve(&base)?.registry
        }
        None => ModelRegistry::default(),
    };
    if !store.exists() {
        return Err(Error::Config(format!("store {} does not exist", store.display())));
    }
    let store_data = SampleStore::open_read_only(store)?;
    let ledger = CostLedger::new();
    for rec in store_data.records() {
        let pricing = match registry.get(&rec.model_id) {
            Ok(spec) => spec.pricing(),
            Err(_) => default_pricing(&rec.model_id).unwrap_or_default(),
        };
        ledger.record(&rec.model_id, pricing, rec.tokens_in, rec.tokens_out);
    }
    let report = CostReport { store: store.display().to_string(), records: store_data.len(), cost: ledger.snapshot() };
    let text = serde_json::to_string_pretty(&report)? + "\n";
    print!("{text}");
    if let Some(p) = out {
        write_atomic(p, text.as_bytes())?;
    }
    let failures = report
        .cost
        .unpriced
        .iter()
        .map(|m| UnitFailure { unit: m.clone(), error: "no price configured".into() })
        .collect();
    Ok(Outcome { failures })
}

fn cmd_import(release: &Path, manifest: &Path, store: Option<&Path>, out: Option<&Path>) -> Result<Outcome> {
    let manifest = Manifest::load(manifest)?;
    let (imported, report) = import_release(release, &manifest)?;
    if let Some(path) = store {
        let mut target = SampleStore::open(path)?;
        for rec in imported.records() {
            target.append(rec.clone())?;
        }
    }
    let text = serde_json::to_string_pretty(&report)? + "\n";
    print!("{text}");
    if let Some(p) = out {
        write_atomic(p, text.as_bytes())?;
    }
    Ok(Outcome::default())
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Explain { run, instances } => cmd_explain(run, instances),
        Command::Matrix { run } => cmd_matrix(run),
        Command::Aopc { run } => cmd_aopc(run),
        Command::Compress { run } => cmd_compress(run),
        Command::Cost { store, config, out } => cmd_cost(store, config.as_deref(), out.as_deref()),
        Command::Import { release, manifest, store, out } => {
            cmd_import(release, manifest, store.as_deref(), out.as_deref())
        }
    }
}

/// Runs the command and maps the result to an exit code.
pub fn main_with(cli: &Cli) -> i32 {
    match run(cli) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
