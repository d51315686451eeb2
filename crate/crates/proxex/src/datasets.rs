//! Dataset readers.
//!
//! | format       | layout                                                     |
//! |--------------|------------------------------------------------------------|
//! | `sst2-tsv`   | tab-separated, header `sentence<TAB>label`, label `0`/`1`  |
//! | `mmlu-csv`   | `question,A,B,C,D,answer`, optional header, answer letter  |
//! | `nq-jsonl`   | `{"question": .., "answer": ..}` or `"answers": [..]`      |
//! | `jsonl`      | `{"id": .., "text": .., "gold": ..}`                       |

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    /// Text placed in the prompt's input slot.
    pub text: String,
    /// Gold label or reference answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    Sst2Tsv,
    MmluCsv,
    NqJsonl,
    Jsonl,
}

pub fn load(path: &Path, format: DatasetFormat) -> Result<Vec<Instance>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let instances = match format {
        DatasetFormat::Sst2Tsv => parse_sst2(&text)?,
        DatasetFormat::MmluCsv => parse_mmlu(&text)?,
        DatasetFormat::NqJsonl => parse_nq(&text)?,
        DatasetFormat::Jsonl => parse_jsonl(&text)?,
    };
    let mut seen = std::collections::BTreeSet::new();
    for inst in &instances {
        if !seen.insert(inst.id.as_str()) {
            return Err(Error::Dataset { line: 0, message: format!("duplicate instance id {}", inst.id) });
        }
    }
    Ok(instances)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Dataset { line, message: e.to_string() }
}

pub fn parse_sst2(text: &str) -> Result<Vec<Instance>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(csv_error)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Dataset { line: 1, message: format!("missing column {name:?}") })
    };
    let (sentence, label) = (col("sentence")?, col("label")?);
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(csv_error)?;
        let line = i + 2;
        let gold = match row.get(label).map(str::trim) {
            Some("1") => "positive",
            Some("0") => "negative",
            other => return Err(Error::Dataset { line, message: format!("label {other:?} is not 0 or 1") }),
        };
        let text = row.get(sentence).unwrap_or("").trim().to_string();
        out.push(Instance { id: format!("sst2-{i}"), text, gold: Some(gold.into()) });
    }
    Ok(out)
}

const LETTERS: [&str; 4] = ["A", "B", "C", "D"];

pub fn parse_mmlu(text: &str) -> Result<Vec<Instance>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(csv_error)?;
        let line = i + 1;
        if row.len() != 6 {
            return Err(Error::Dataset { line, message: format!("expected 6 fields, got {}", row.len()) });
        }
        if i == 0 && row.get(0).map(|q| q.trim().eq_ignore_ascii_case("question")) == Some(true) {
            continue;
        }
        let answer = row[5].trim().to_uppercase();
        if !LETTERS.contains(&answer.as_str()) {
            return Err(Error::Dataset { line, message: format!("answer {:?} is not one of A-D", &row[5]) });
        }
        let mut text = row[0].trim().to_string();
        for (letter, option) in LETTERS.iter().zip(row.iter().skip(1)) {
            text.push_str(&format!("\n{letter}. {}", option.trim()));
        }
        out.push(Instance { id: format!("mmlu-{}", out.len()), text, gold: Some(answer) });
    }
    Ok(out)
}

fn json_lines(text: &str) -> impl Iterator<Item = (usize, Result<Value>)> + '_ {
    text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| {
        let line = i + 1;
        (line, serde_json::from_str::<Value>(l).map_err(|e| Error::Dataset { line, message: e.to_string() }))
    })
}

fn field<'a>(v: &'a Value, name: &str, line: usize) -> Result<&'a str> {
    v.get(name).and_then(Value::as_str).ok_or_else(|| Error::Dataset { line, message: format!("missing string field {name:?}") })
}

fn id_of(v: &Value, prefix: &str, index: usize) -> String {
    match v.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => format!("{prefix}-{index}"),
    }
}

pub fn parse_nq(text: &str) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (line, v) in json_lines(text) {
        let v = v?;
        let question = field(&v, "question", line)?;
        let answer = match (v.get("answer"), v.get("answers")) {
            (Some(Value::String(a)), _) => a.clone(),
            (_, Some(Value::Array(list))) => list
                .first()
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Dataset { line, message: "answers list is empty or not strings".into() })?
                .to_string(),
            _ => return Err(Error::Dataset { line, message: "missing answer".into() }),
        };
        out.push(Instance { id: id_of(&v, "nq", out.len()), text: question.trim().to_string(), gold: Some(answer) });
    }
    Ok(out)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (line, v) in json_lines(text) {
        let v = v?;
        let text = field(&v, "text", line)?.to_string();
        let gold = v.get("gold").and_then(Value::as_str).map(str::to_string);
        out.push(Instance { id: id_of(&v, "item", out.len()), text, gold });
    }
    Ok(out)
}
