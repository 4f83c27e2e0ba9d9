use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetadataError {
    #[error("invalid batch: arity must be at least 1")]
    InvalidArity,
    #[error("metadata already carries a partition frame")]
    NestingLimit,
    #[error("metadata carries no partition frame")]
    NoPartitionFrame,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GateError {
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error("gate `{gate}`: feed #{seq} of batch {batch} exceeds its arity {arity}")]
    DuplicateFeed {
        gate: String,
        batch: u64,
        seq: u64,
        arity: u64,
    },
    #[error("gate `{gate}`: feed signature {got:?} does not match {expected:?}")]
    SignatureError {
        gate: String,
        expected: Vec<String>,
        got: Vec<String>,
    },
    #[error("gate `{gate}`: feed of batch {batch} carries arity {got}, batch has {expected}")]
    ArityMismatch {
        gate: String,
        batch: u64,
        expected: u64,
        got: u64,
    },
    #[error("gate `{0}` is closed")]
    Closed(String),
    #[error("gate `{gate}` does not support {op}")]
    ModeMismatch { gate: String, op: &'static str },
    #[error("connection lost: {0}")]
    ConnectionLost(String),
    #[error("remote gate error: {0}")]
    Remote(String),
}

impl GateError {
    pub fn is_closed(&self) -> bool {
        matches!(self, GateError::Closed(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CreditError {
    #[error("credit link `{link}` crosses scopes: {detail}")]
    ScopeError { link: String, detail: String },
    #[error("credit link `{0}` with zero initial credits would deadlock")]
    DeadlockRisk(String),
    #[error("credit link `{link}`: release would exceed {initial} initial credits")]
    AccountingError { link: String, initial: u64 },
}
