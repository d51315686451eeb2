//! File-backed sample store: persistence, damage tolerance and replay.

use std::io::Write;

use proxex::model::{EngineOptions, MockDefinition, ModelRegistry, QueryContext, QueryEngine};
use proxex::store::SampleStore;
use proxex::Error;

fn registry() -> ModelRegistry {
    let mut reg = ModelRegistry::default();
    let weights = [("good".to_string(), 2.0), ("bad".to_string(), -2.0)].into();
    reg.register_mock("lin", MockDefinition::LinearSentiment { weights, bias: 0.0, labels: vec!["positive".into(), "negative".into()] })
        .unwrap();
    reg
}

fn batch(n: usize) -> Vec<(String, QueryContext)> {
    (0..n)
        .map(|i| {
            let ctx = QueryContext { dataset_id: "ds".into(), instance_id: format!("i{i}"), segmentation_mode: "word".into(), mask: "11".into() };
            (format!("review {i}: {}", if i % 2 == 0 { "good" } else { "bad" }), ctx)
        })
        .collect()
}

#[test]
fn concurrent_writes_persist_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    let queries = batch(40);
    let live = {
        let engine = QueryEngine::new(registry(), SampleStore::open(&path).unwrap(), EngineOptions::default()).unwrap();
        let out: Vec<_> = engine.query_all("lin", &queries).into_iter().map(Result::unwrap).collect();
        assert_eq!(engine.live_queries(), 40);
        out
    };
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 40);

    let options = EngineOptions { replay_only: true, ..Default::default() };
    let engine = QueryEngine::new(registry(), SampleStore::open_read_only(&path).unwrap(), options).unwrap();
    let replayed: Vec<_> = engine.query_all("lin", &queries).into_iter().map(Result::unwrap).collect();
    assert_eq!(live, replayed);
    assert_eq!(engine.live_queries(), 0);
    assert_eq!(engine.cache_hits(), 40);
    assert!(matches!(engine.cached_query("lin", "unseen prompt", &QueryContext::default()), Err(Error::ReplayMiss { .. })));
    assert_eq!(std::fs::read_to_string(&path).unwrap(), text);
}

#[test]
fn damaged_lines_are_skipped_and_appends_continue() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    {
        let engine = QueryEngine::new(registry(), SampleStore::open(&path).unwrap(), EngineOptions::default()).unwrap();
        for r in engine.query_all("lin", &batch(5)) {
            r.unwrap();
        }
    }
    // A torn final write and a line of garbage.
    let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
    f.write_all(b"not json\n{\"record_version\": 1, \"model_id\": \"lin\"").unwrap();
    drop(f);

    let store = SampleStore::open(&path).unwrap();
    assert_eq!(store.len(), 5);
    assert_eq!(store.corrupt_lines(), 2);
    let engine = QueryEngine::new(registry(), store, EngineOptions::default()).unwrap();
    for r in engine.query_all("lin", &batch(8)) {
        r.unwrap();
    }
    assert_eq!(engine.cache_hits(), 5);
    assert_eq!(engine.live_queries(), 3);
    drop(engine);

    let reopened = SampleStore::open_read_only(&path).unwrap();
    assert_eq!(reopened.len(), 8);
    assert_eq!(reopened.corrupt_lines(), 2);
}

#[test]
fn export_is_sorted_and_reloadable() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    {
        let engine = QueryEngine::new(registry(), SampleStore::open(&path).unwrap(), EngineOptions::default()).unwrap();
        for r in engine.query_all("lin", &batch(10)) {
            r.unwrap();
        }
    }
    let store = SampleStore::open_read_only(&path).unwrap();
    let exported = dir.path().join("export.jsonl");
    store.export(&exported).unwrap();
    let again = SampleStore::open_read_only(&exported).unwrap();
    assert_eq!(again.len(), 10);
    let a: Vec<_> = store.records().into_iter().cloned().collect();
    let b: Vec<_> = again.records().into_iter().cloned().collect();
    assert_eq!(a, b);
    let usage = again.usage_by_model();
    assert_eq!(usage["lin"].queries, 10);
}
