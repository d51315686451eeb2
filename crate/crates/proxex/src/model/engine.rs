use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;

use super::openai::{OpenAiClient, RetryPolicy};
use super::{CostLedger, DecodingParams, LedgerSnapshot, Limiter, MockOracle, ModelOutput, ModelRegistry, ModelSpec};
use crate::error::{Error, Result};
use crate::store::{prompt_hash, AppendOutcome, SampleRecord, SampleStore, RECORD_VERSION};

#[derive(Debug, Clone, PartialEq)]
pub struct EngineOptions {
    /// Serve only from the store; a cold key is an error.
    pub replay_only: bool,
    /// In-flight request cap per endpoint.
    pub max_inflight: usize,
    /// Keep prompt text in stored records.
    pub store_prompts: bool,
    pub retry: RetryPolicy,
    pub timeout: Duration,
    /// Seeds noisy mock oracles that do not fix their own seed.
    pub default_seed: u64,
    pub params: DecodingParams,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            replay_only: false,
            max_inflight: 8,
            store_prompts: false,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(60),
            default_seed: 0,
            params: DecodingParams::default(),
        }
    }
}

/// Provenance stored alongside a query.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QueryContext {
    pub dataset_id: String,
    pub instance_id: String,
    pub segmentation_mode: String,
    /// Mask bitstring; empty for unperturbed auxiliary queries.
    pub mask: String,
}

/// Cached, replayable, rate-limited access to every registered model.
pub struct QueryEngine {
    registry: ModelRegistry,
    options: EngineOptions,
    store: Mutex<SampleStore>,
    ledger: CostLedger,
    consumed: Mutex<BTreeMap<(String, String), (u64, u64)>>,
    limiter: Limiter,
    oracles: HashMap<String, MockOracle>,
    client: OnceLock<OpenAiClient>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl QueryEngine {
    pub fn new(registry: ModelRegistry, store: SampleStore, options: EngineOptions) -> Result<Self> {
        registry.validate()?;
        let mut oracles = HashMap::new();
        for spec in &registry.models {
            if let Some(name) = spec.mock_name() {
                oracles.insert(spec.model_id.clone(), registry.oracle(name, options.default_seed)?);
            }
        }
        let limiter = Limiter::new(options.max_inflight);
        Ok(QueryEngine {
            registry,
            options,
            store: Mutex::new(store),
            ledger: CostLedger::new(),
            consumed: Mutex::new(BTreeMap::new()),
            limiter,
            oracles,
            client: OnceLock::new(),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn registry(&self) -> &ModelRegistry {
        &self.registry
    }

    pub fn options(&self) -> &EngineOptions {
        &self.options
    }

    pub fn spec(&self, model_id: &str) -> Result<&ModelSpec> {
        self.registry.get(model_id)
    }

    /// Spend on live queries issued by this engine.
    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn store(&self) -> MutexGuard<'_, SampleStore> {
        self.store.lock().expect("store lock")
    }

    pub fn into_store(self) -> SampleStore {
        self.store.into_inner().expect("store lock")
    }

    pub fn cache_hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn live_queries(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn peak_inflight(&self, model_id: &str) -> Result<usize> {
        Ok(self.limiter.peak(&self.spec(model_id)?.endpoint))
    }

    fn client(&self) -> Result<&OpenAiClient> {
        if let Some(c) = self.client.get() {
            return Ok(c);
        }
        let c = OpenAiClient::new(self.options.retry, self.options.timeout)?;
        Ok(self.client.get_or_init(|| c))
    }

    /// Usage of every distinct record consumed so far, priced per model.
    /// Identical for a live run and its replay.
    pub fn consumed_usage(&self) -> LedgerSnapshot {
        let ledger = CostLedger::new();
        for ((model, _), (tin, tout)) in self.consumed.lock().expect("consumed lock").iter() {
            let pricing = self.registry.get(model).map(ModelSpec::pricing).unwrap_or_default();
            ledger.record(model, pricing, *tin, *tout);
        }
        ledger.snapshot()
    }

    fn consume(&self, model_id: &str, hash: &str, out: &ModelOutput) {
        self.consumed
            .lock()
            .expect("consumed lock")
            .insert((model_id.to_string(), hash.to_string()), (out.tokens_in, out.tokens_out));
    }

    /// Answers `prompt` from the store, or queries the model and records the
    /// result.
    pub fn cached_query(&self, model_id: &str, prompt: &str, ctx: &QueryContext) -> Result<ModelOutput> {
        let spec = self.spec(model_id)?;
        let params = &self.options.params;
        let hash = prompt_hash(prompt, params);
        if let Some(out) = self.store().replay_lookup(model_id, &hash, params) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            self.consume(model_id, &hash, &out);
            return Ok(out);
        }
        if self.options.replay_only {
            return Err(Error::ReplayMiss { model_id: model_id.to_string(), prompt_hash: hash });
        }

        let out = {
            let _permit = self.limiter.acquire(&spec.endpoint);
            self.live_query(spec, prompt)?
        };
        self.misses.fetch_add(1, Ordering::Relaxed);
        self.ledger.record(model_id, spec.pricing(), out.tokens_in, out.tokens_out);

        let record = SampleRecord {
            record_version: RECORD_VERSION,
            model_id: model_id.to_string(),
            dataset_id: ctx.dataset_id.clone(),
            instance_id: ctx.instance_id.clone(),
            segmentation_mode: ctx.segmentation_mode.clone(),
            mask: ctx.mask.clone(),
            prompt_hash: hash.clone(),
            output_text: out.text.clone(),
            label: out.label.clone(),
            prob: out.prob,
            tokens_in: out.tokens_in,
            tokens_out: out.tokens_out,
            decoding_params: params.canonical(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            prompt: self.options.store_prompts.then(|| prompt.to_string()),
        };
        let mut store = self.store();
        let out = match store.append(record) {
            Ok(AppendOutcome::Inserted | AppendOutcome::Duplicate) => out,
            // A concurrent query for the same key got there first.
            Err(Error::Conflict { .. }) => {
                log::warn!("model {model_id}: concurrent answers for prompt {hash} differ; keeping the first");
                store.lookup(model_id, &hash).map(SampleRecord::output).unwrap_or(out)
            }
            Err(e) => return Err(e),
        };
        drop(store);
        self.consume(model_id, &hash, &out);
        Ok(out)
    }

    fn live_query(&self, spec: &ModelSpec, prompt: &str) -> Result<ModelOutput> {
        match self.oracles.get(&spec.model_id) {
            Some(oracle) => Ok(oracle.respond(prompt)),
            None => self.client()?.chat(spec, prompt, &self.options.params),
        }
    }

    /// Queries every prompt in parallel; results keep input order.
    pub fn query_all(&self, model_id: &str, prompts: &[(String, QueryContext)]) -> Vec<Result<ModelOutput>> {
        prompts.par_iter().map(|(p, ctx)| self.cached_query(model_id, p, ctx)).collect()
    }

    /// Embeds `inputs` with the registry's embedding endpoint.
    pub fn embed(&self, inputs: &[&str]) -> Result<Vec<Vec<f64>>> {
        let spec = self
            .registry
            .embeddings
            .as_ref()
            .ok_or_else(|| Error::ScorerUnavailable("no embedding endpoint configured".into()))?;
        if self.options.replay_only {
            return Err(Error::ScorerUnavailable("embeddings are not replayable".into()));
        }
        let _permit = self.limiter.acquire(&spec.endpoint);
        self.client()?.embed(spec, inputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MockDefinition;

    fn engine(store: SampleStore, replay_only: bool) -> QueryEngine {
        let mut reg = ModelRegistry::default();
        let weights = [("good".to_string(), 2.0), ("bad".to_string(), -2.0)].into_iter().collect();
        reg.register_mock("lin", MockDefinition::LinearSentiment { weights, bias: 0.0, labels: vec!["positive".into(), "negative".into()] })
            .unwrap();
        QueryEngine::new(reg, store, EngineOptions { replay_only, ..Default::default() }).unwrap()
    }

    #[test]
    fn hit_does_not_touch_ledger() {
        let e = engine(SampleStore::in_memory(), false);
        let ctx = QueryContext::default();
        let a = e.cached_query("lin", "good film", &ctx).unwrap();
        let spent = e.ledger().snapshot();
        let b = e.cached_query("lin", "good film", &ctx).unwrap();
        assert_eq!(a, b);
        assert_eq!(e.ledger().snapshot(), spent);
        assert_eq!((e.cache_hits(), e.live_queries()), (1, 1));
        assert_eq!(e.store().len(), 1);
    }

    #[test]
    fn replay_only_cold_key_fails() {
        let e = engine(SampleStore::in_memory(), true);
        match e.cached_query("lin", "good", &QueryContext::default()) {
            Err(Error::ReplayMiss { model_id, prompt_hash }) => {
                assert_eq!(model_id, "lin");
                assert_eq!(prompt_hash.len(), 64);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(e.ledger().query_count(), 0);
    }

    #[test]
    fn replay_reproduces_live_outputs_and_consumed_usage() {
        let live = engine(SampleStore::in_memory(), false);
        let prompts: Vec<(String, QueryContext)> =
            ["good", "bad", "good bad", "good good", "good"].iter().map(|p| (p.to_string(), QueryContext::default())).collect();
        let first: Vec<ModelOutput> = live.query_all("lin", &prompts).into_iter().map(Result::unwrap).collect();
        let usage = live.consumed_usage();
        assert_eq!(usage.models["lin"].queries, 4);

        let replay = engine(live.into_store(), true);
        let second: Vec<ModelOutput> = replay.query_all("lin", &prompts).into_iter().map(Result::unwrap).collect();
        assert_eq!(first, second);
        assert_eq!(replay.consumed_usage(), usage);
        assert_eq!(replay.ledger().query_count(), 0);
    }

    #[test]
    fn unknown_model() {
        let e = engine(SampleStore::in_memory(), false);
        assert!(matches!(e.cached_query("nope", "x", &QueryContext::default()), Err(Error::UnknownModel(_))));
    }
}
