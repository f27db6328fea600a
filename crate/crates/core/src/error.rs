use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed CSV in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("malformed schema {path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("column `{0}` named in the schema is missing from the CSV header")]
    MissingColumn(String),

    #[error("column `{0}` appears more than once")]
    DuplicateColumn(String),

    #[error("row {row}: value `{value}` is not a level of feature `{feature}`")]
    UnknownLevel {
        row: usize,
        feature: String,
        value: String,
    },

    #[error("row {row}: value `{value}` of continuous feature `{feature}` is not a number")]
    NotNumeric {
        row: usize,
        feature: String,
        value: String,
    },

    #[error("column `{column}` must be binary, found values {values:?}")]
    NonBinary { column: String, values: Vec<String> },

    #[error("row {row}: missing value in column `{column}`")]
    MissingLabel { row: usize, column: String },

    #[error("duplicate instance id `{0}`")]
    DuplicateId(String),

    #[error("dataset is empty after filtering rows with too many missing features")]
    EmptyDataset,

    #[error("dataset lacks instances of the {0} group")]
    MissingGroup(&'static str),

    #[error("split: stratum (s={group}, y={outcome}) has {size} instance(s), need at least 2")]
    StratumTooSmall {
        group: &'static str,
        outcome: u8,
        size: usize,
    },

    #[error("labels contain a single class")]
    SingleClass,

    #[error("design matrix contains non-finite entries")]
    NonFinite,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("penalized Hessian is not positive definite; add regularization")]
    Singular,

    #[error("model selection: every cross-validation fold was degenerate")]
    AllFoldsDegenerate,

    #[error("instance does not match the model schema: {0}")]
    SchemaMismatch(String),

    #[error(
        "protected-group ICs have zero spread; pass an absolute delta instead of a multiplier"
    )]
    ZeroSpread,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("need {needed} peers for sampling but only {available} are available")]
    NotEnoughPeers { needed: usize, available: usize },

    #[error(
        "subset IC bound violated for instance `{id}`: |xi_a - mean subset xi| = {gap} > delta = {delta}"
    )]
    BoundViolation { id: String, gap: f64, delta: f64 },

    #[error("no auditable instances")]
    NoAuditable,

    #[error("runs share no commonly audited instance")]
    EmptyIntersection,

    #[error("infeasible imbalance target {target}: {reason}")]
    InfeasibleOmega { target: f64, reason: String },

    #[error("unknown instance id `{0}`")]
    UnknownId(String),

    #[error("invalid synthetic spec: {0}")]
    Synth(String),

    #[error("serialization: {0}")]
    Serialize(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the environment (files, formats) rather than the audit itself.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Csv { .. } | Error::Schema { .. } | Error::Serialize(_)
        )
    }
}
