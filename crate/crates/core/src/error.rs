use thiserror::Error;

/// Errors raised by the reward engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("unknown domain `{0}`")]
    UnknownDomain(String),

    #[error("unknown record `{0}`")]
    UnknownRecord(String),

    #[error("rule table validation failed: {0}")]
    RuleValidation(String),

    #[error("incomplete assignment: no label for step `{step}`")]
    IncompleteAssignment { step: String },

    #[error("truth table has {size} rows, exceeding the bound of {bound}")]
    TruthTableTooLarge { size: u128, bound: u128 },

    #[error("step index {index} outside 1..={len}")]
    StepIndex { index: usize, len: usize },

    #[error("domain mismatch: trace is {trace}, gold record is {gold}")]
    DomainMismatch { trace: String, gold: String },

    #[error("group size {0} is below the minimum of 2")]
    GroupSize(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },

    #[error("training diverged at iteration {iteration}: {message}")]
    Divergence { iteration: usize, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by invalid user input or configuration, as
    /// opposed to I/O failures or broken internal invariants.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Divergence { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
