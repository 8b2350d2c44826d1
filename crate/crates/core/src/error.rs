use thiserror::Error;

use crate::domain::{GroupId, SequenceId, Stage};

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("group {0} is not configured for this stage")]
    UnknownGroup(GroupId),
}

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 values, got {0}")]
    TooShort(usize),
    #[error("rating references unknown sequence {0}")]
    UnknownSequence(SequenceId),
    #[error("only {0} rated sequences overlap the reference table")]
    InsufficientOverlap(usize),
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampling plan: {0}")]
    Plan(String),
    #[error("candidate pool is empty")]
    EmptyPool,
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}:{line}: {message}")]
    Line {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {0} is not configured")]
    StageClosed(Stage),
    #[error("no reference MOS table: the pretest stage has not been filtered")]
    MissingReference,
    #[error("nothing to export: no stage has been filtered yet")]
    NothingFiltered,
    #[error("worker registry: {0}")]
    Registry(String),
    #[error("store: {0}")]
    Store(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("MOS table is empty")]
    Empty,
    #[error("need at least {needed} sequences, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("sequence {0} has a missing or non-finite score")]
    MissingDimension(SequenceId),
}
