use alloc::string::String;

/// Errors produced by `cocos-core`.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("embedding must have at least one dimension")]
    EmptyVector,
    #[error("non-finite value encountered")]
    NonFinite,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("query {0} is not part of the batch")]
    QueryNotInBatch(u64),
    #[error("invalid score set: {0}")]
    InvalidScoreSet(String),
    #[error("expected exactly {expected} positive candidate(s), found {found}")]
    WrongPositiveCount { expected: usize, found: usize },
    #[error("score set has no negative candidates")]
    NoNegatives,
    #[error("score set has no positive candidates")]
    NoPositives,
    #[error("operation requires a {expected} batch layout")]
    WrongLayout { expected: &'static str },
    #[error("candidate {0} not found")]
    CandidateNotFound(u64),
    #[error("evaluation corpus is empty")]
    EmptyCorpus,
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("function value is not finite at coordinate {coordinate}")]
    NonFiniteFunctionValue { coordinate: usize },
    #[error("dataset yields no complete batch")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset was generated without identifier injection")]
    NoIdentifiers,
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("training loss diverged at epoch {epoch}")]
    DivergedLoss { epoch: usize },
}

pub type Result<T> = core::result::Result<T, Error>;
