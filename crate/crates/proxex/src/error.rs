use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] proxex_core::Error),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed provider response: {0}")]
    Protocol(String),
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),

    #[error("replay miss for model {model_id}, prompt {prompt_hash}")]
    ReplayMiss { model_id: String, prompt_hash: String },
    #[error("{} replay miss(es) for model {model_id}, first prompt {}", prompt_hashes.len(), prompt_hashes.first().map(String::as_str).unwrap_or("-"))]
    ReplayMisses { model_id: String, prompt_hashes: Vec<String> },
    #[error("cache error: {0}")]
    Cache(String),
    #[error("conflicting record for model {model_id}, prompt {prompt_hash}")]
    Conflict { model_id: String, prompt_hash: String },
    #[error("import error at line {line}: {message}")]
    Import { line: usize, message: String },
    #[error("dataset error at line {line}: {message}")]
    Dataset { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown model {0}")]
    UnknownModel(String),

    #[error("output {0:?} contains no valid label")]
    UnparseableOutput(String),
    #[error("generation scorer unavailable: {0}")]
    ScorerUnavailable(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
