//! Append-only JSONL store of model queries.
//!
//! Each line is one [`SampleRecord`]. Records are keyed by
//! `(model_id, prompt_hash)`; the prompt hash covers the prompt text and the
//! canonical decoding parameters. The store doubles as the query cache and as
//! the replay source for offline recomputation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use proxex_core::cost::Usage;
use proxex_core::Mask;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DecodingParams, ModelOutput};

pub const RECORD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub record_version: u32,
    pub model_id: String,
    pub dataset_id: String,
    pub instance_id: String,
    pub segmentation_mode: String,
    /// Bitstring over the instance's features; empty for unperturbed
    /// auxiliary queries.
    pub mask: String,
    pub prompt_hash: String,
    pub output_text: String,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub prob: Option<f64>,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub decoding_params: Value,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

impl SampleRecord {
    pub fn output(&self) -> ModelOutput {
        ModelOutput {
            text: self.output_text.clone(),
            label: self.label.clone(),
            prob: self.prob,
            tokens_in: self.tokens_in,
            tokens_out: self.tokens_out,
        }
    }

    fn same_payload(&self, other: &SampleRecord) -> bool {
        self.output_text == other.output_text
            && self.label == other.label
            && self.prob == other.prob
            && self.tokens_in == other.tokens_in
            && self.tokens_out == other.tokens_out
            && self.decoding_params == other.decoding_params
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.record_version != RECORD_VERSION {
            return Err(format!("unsupported record_version {} (expected {RECORD_VERSION})", self.record_version));
        }
        if self.model_id.is_empty() {
            return Err("empty model_id".into());
        }
        if self.prompt_hash.is_empty() {
            return Err("empty prompt_hash".into());
        }
        Mask::from_bitstring(&self.mask).map_err(|e| e.to_string())?;
        if let Some(p) = self.prob {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("prob {p} outside [0, 1]"));
            }
        }
        if !self.decoding_params.is_object() {
            return Err("decoding_params is not an object".into());
        }
        Ok(())
    }
}

/// SHA-256 over the prompt and canonical decoding parameters.
pub fn prompt_hash(prompt: &str, params: &DecodingParams) -> String {
    let canonical = serde_json::json!({"params": params.canonical(), "prompt": prompt});
    let digest = Sha256::digest(canonical.to_string().as_bytes());
    hex::encode(digest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendOutcome {
    Inserted,
    /// Same key and payload already present; nothing written.
    Duplicate,
}

type Key = (String, String);

#[derive(Debug)]
pub struct SampleStore {
    path: Option<PathBuf>,
    writer: Option<BufWriter<File>>,
    index: HashMap<Key, SampleRecord>,
    corrupt_lines: usize,
    read_only: bool,
}

fn ends_mid_line(path: &Path) -> Result<bool> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = f.metadata().map_err(|e| Error::io(path, e))?.len();
    if len == 0 {
        return Ok(false);
    }
    let mut last = [0u8];
    f.seek(SeekFrom::End(-1)).map_err(|e| Error::io(path, e))?;
    f.read_exact(&mut last).map_err(|e| Error::io(path, e))?;
    Ok(last[0] != b'\n')
}

impl SampleStore {
    pub fn in_memory() -> Self {
        SampleStore { path: None, writer: None, index: HashMap::new(), corrupt_lines: 0, read_only: false }
    }

    /// Opens (creating if needed) a store for appending.
    pub fn open(path: &Path) -> Result<Self> {
        let mut store = Self::load(path)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        // Terminate a torn final line so the next record starts on its own.
        if ends_mid_line(path)? {
            file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        store.writer = Some(BufWriter::new(file));
        Ok(store)
    }

    /// Opens an existing store without write access. A missing file is an
    /// empty store.
    pub fn open_read_only(path: &Path) -> Result<Self> {
        let mut store = Self::load(path)?;
        store.read_only = true;
        Ok(store)
    }

    fn load(path: &Path) -> Result<Self> {
        let mut store = SampleStore {
            path: Some(path.to_path_buf()),
            writer: None,
            index: HashMap::new(),
            corrupt_lines: 0,
            read_only: false,
        };
        if !path.exists() {
            return Ok(store);
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed = serde_json::from_str::<SampleRecord>(&line)
                .map_err(|e| e.to_string())
                .and_then(|r| r.validate().map(|_| r));
            match parsed {
                Ok(record) => {
                    if let Err(e) = store.insert(record) {
                        log::warn!("{}:{}: {e}; keeping the earlier record", path.display(), lineno + 1);
                        store.corrupt_lines += 1;
                    }
                }
                Err(e) => {
                    log::warn!("{}:{}: skipping corrupt record: {e}", path.display(), lineno + 1);
                    store.corrupt_lines += 1;
                }
            }
        }
        Ok(store)
    }

    fn insert(&mut self, record: SampleRecord) -> Result<AppendOutcome> {
        let key = (record.model_id.clone(), record.prompt_hash.clone());
        if let Some(existing) = self.index.get(&key) {
            return if existing.same_payload(&record) {
                Ok(AppendOutcome::Duplicate)
            } else {
                Err(Error::Conflict { model_id: key.0, prompt_hash: key.1 })
            };
        }
        self.index.insert(key, record);
        Ok(AppendOutcome::Inserted)
    }

    /// Appends `record`, writing one line when the key is new.
    pub fn append(&mut self, record: SampleRecord) -> Result<AppendOutcome> {
        if self.read_only {
            return Err(Error::Cache("store is opened read-only".into()));
        }
        record.validate().map_err(Error::Cache)?;
        let line = serde_json::to_string(&record)?;
        let outcome = self.insert(record)?;
        if outcome == AppendOutcome::Inserted {
            if let Some(w) = self.writer.as_mut() {
                let path = self.path.clone().unwrap_or_default();
                writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
            }
        }
        Ok(outcome)
    }

    pub fn lookup(&self, model_id: &str, prompt_hash: &str) -> Option<&SampleRecord> {
        self.index.get(&(model_id.to_string(), prompt_hash.to_string()))
    }

    /// Exact-key retrieval. A miss is `None`; callers choose between a replay
    /// error and a live query.
    pub fn replay_lookup(&self, model_id: &str, prompt_hash: &str, params: &DecodingParams) -> Option<ModelOutput> {
        self.lookup(model_id, prompt_hash).filter(|r| r.decoding_params == params.canonical()).map(SampleRecord::output)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn corrupt_lines(&self) -> usize {
        self.corrupt_lines
    }

    pub fn is_read_only(&self) -> bool {
        self.read_only
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Records sorted by key.
    pub fn records(&self) -> Vec<&SampleRecord> {
        let mut out: Vec<&SampleRecord> = self.index.values().collect();
        out.sort_by(|a, b| (&a.model_id, &a.prompt_hash).cmp(&(&b.model_id, &b.prompt_hash)));
        out
    }

    /// Token usage per model over every stored record.
    pub fn usage_by_model(&self) -> BTreeMap<String, Usage> {
        let mut out: BTreeMap<String, Usage> = BTreeMap::new();
        for r in self.index.values() {
            out.entry(r.model_id.clone()).or_default().record(r.tokens_in, r.tokens_out);
        }
        out
    }

    /// Writes every record, sorted by key, to `path`.
    pub fn export(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in self.records() {
            writeln!(w, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Describes a released sample file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub datasets: Vec<String>,
    pub models: Vec<String>,
    pub segmentation_modes: Vec<String>,
    /// Expected record counts per model; checked when present.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub record_counts: BTreeMap<String, usize>,
    /// Renames applied to each raw record before schema validation
    /// (`release field name -> canonical field name`).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub field_map: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Manifest describing the contents of `store`.
    pub fn describe(store: &SampleStore) -> Self {
        let mut datasets = BTreeSet::new();
        let mut modes = BTreeSet::new();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for r in store.records() {
            datasets.insert(r.dataset_id.clone());
            modes.insert(r.segmentation_mode.clone());
            *counts.entry(r.model_id.clone()).or_default() += 1;
        }
        Manifest {
            datasets: datasets.into_iter().collect(),
            models: counts.keys().cloned().collect(),
            segmentation_modes: modes.into_iter().collect(),
            record_counts: counts,
            field_map: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImportReport {
    pub records: usize,
    pub per_model: BTreeMap<String, usize>,
    /// Keyed `model_id/dataset_id`.
    pub per_model_dataset: BTreeMap<String, usize>,
}

/// Validates every record of a released JSONL file against `manifest` and
/// loads them into an in-memory store.
pub fn import_release(path: &Path, manifest: &Manifest) -> Result<(SampleStore, ImportReport)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut store = SampleStore::in_memory();
    let mut report = ImportReport::default();
    let mut mask_lengths: HashMap<(String, String, String), usize> = HashMap::new();
    let models: BTreeSet<&str> = manifest.models.iter().map(String::as_str).collect();
    let datasets: BTreeSet<&str> = manifest.datasets.iter().map(String::as_str).collect();
    let modes: BTreeSet<&str> = manifest.segmentation_modes.iter().map(String::as_str).collect();

    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Import { line: lineno, message };
        let mut raw: Value = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        let obj = raw.as_object_mut().ok_or_else(|| fail("record is not a JSON object".into()))?;
        for (from, to) in &manifest.field_map {
            if let Some(v) = obj.remove(from) {
                obj.insert(to.clone(), v);
            }
        }
        let record: SampleRecord = serde_json::from_value(raw).map_err(|e| fail(e.to_string()))?;
        record.validate().map_err(fail)?;
        if !models.contains(record.model_id.as_str()) {
            return Err(fail(format!("model {} not declared in manifest", record.model_id)));
        }
        if !datasets.contains(record.dataset_id.as_str()) {
            return Err(fail(format!("dataset {} not declared in manifest", record.dataset_id)));
        }
        if !modes.contains(record.segmentation_mode.as_str()) {
            return Err(fail(format!("segmentation mode {} not declared in manifest", record.segmentation_mode)));
        }
        if !record.mask.is_empty() {
            let key = (record.dataset_id.clone(), record.instance_id.clone(), record.segmentation_mode.clone());
            let len = *mask_lengths.entry(key).or_insert(record.mask.len());
            if len != record.mask.len() {
                return Err(fail(format!(
                    "mask length {} disagrees with {len} seen earlier for instance {}",
                    record.mask.len(),
                    record.instance_id
                )));
            }
        }
        let model = record.model_id.clone();
        let dataset = record.dataset_id.clone();
        match store.insert(record).map_err(|e| fail(e.to_string()))? {
            AppendOutcome::Inserted => {
                report.records += 1;
                *report.per_model.entry(model.clone()).or_default() += 1;
                *report.per_model_dataset.entry(format!("{model}/{dataset}")).or_default() += 1;
            }
            AppendOutcome::Duplicate => {}
        }
    }
    for (model, expected) in &manifest.record_counts {
        let got = report.per_model.get(model).copied().unwrap_or(0);
        if got != *expected {
            return Err(Error::Import { line: 0, message: format!("model {model}: manifest declares {expected} records, found {got}") });
        }
    }
    Ok((store, report))
}
