use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("input text is empty")]
    EmptyInput,
    #[error("segmentation produced a single feature: delimiter {0:?} does not occur")]
    DegenerateSegmentation(String),
    #[error("mask has length {got}, expected {expected}")]
    MaskShape { expected: usize, got: usize },
    #[error("sampling budget {0} is too small for kernel SHAP (need at least 2)")]
    InsufficientBudget(usize),
    #[error("shapley kernel weight is infinite for coalition size {ones} of {n}")]
    InfiniteWeight { ones: usize, n: usize },
    #[error("normal equations are singular")]
    SingularSystem,
    #[error("kernel SHAP needs at least one proper coalition sample for n = {0}")]
    InsufficientSamples(usize),
    #[error("{what} = {got} exceeds the limit of {max}")]
    SizeLimit { what: &'static str, got: usize, max: usize },
    #[error("no samples to evaluate")]
    NoSamples,
    #[error("missing prediction for instance {0}")]
    IncompleteInput(String),
    #[error("prompt has no in-context examples to delete")]
    NoExamples,
    #[error("removal ratio is undefined when the reference MDTA is 0")]
    UndefinedRatio,
    #[error("no price configured for model {0}")]
    MissingPrice(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
