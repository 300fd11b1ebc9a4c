use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no datasets")]
    NoDatasets,

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("cost matrix contains a non-finite entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },

    #[error("token budget exceeded: {gts} ground-truth instances for {tokens} tokens")]
    TokenBudgetExceeded { gts: usize, tokens: usize },

    #[error("query budget exceeded: {targets} relation targets for {queries} queries")]
    QueryBudgetExceeded { targets: usize, queries: usize },

    #[error("degenerate ground-truth box (w = {w}, h = {h})")]
    DegenerateBox { w: f64, h: f64 },

    #[error("ground-truth instance {0} has no matched prediction")]
    UnmatchedInstance(usize),

    #[error("image is {got}x{got} but the detector expects {expected}x{expected}")]
    ImageSize { got: usize, expected: usize },

    #[error("predicate `{0}` is orientation-sensitive but has no swap partner")]
    MissingSwapPartner(String),

    #[error("record stream exhausted")]
    StreamExhausted,

    #[error("schema violation in record {record}, field `{field}`: {reason}")]
    Schema {
        record: usize,
        field: String,
        reason: String,
    },

    #[error("dangling relation in record {record}: relation {relation} references instance {instance} of {count}")]
    DanglingRelation {
        record: usize,
        relation: usize,
        instance: usize,
        count: usize,
    },

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("unknown class `{0}` in class split")]
    UnknownClass(String),

    #[error("unknown vocabulary `{0}`")]
    UnknownVocabulary(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}; offending batch written to {dump}")]
    NonFiniteLoss { step: usize, dump: String },

    #[error("no query embedding: no triplet scored above {floor}")]
    NoQueryEmbedding { floor: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
