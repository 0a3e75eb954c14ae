use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // tensors
    #[error("incongruent parameter vectors: {0}")]
    IncongruentShapes(String),
    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),
    #[error("invalid parameter group `{name}`: shape {shape:?} does not cover {len} values")]
    BadGroupShape {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("duplicate parameter group `{0}`")]
    DuplicateGroup(String),

    // models
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("dataset is empty")]
    EmptyDataset,

    // data
    #[error("client quota is zero: {samples} samples cannot fill {clients} clients")]
    QuotaTooSmall { samples: usize, clients: usize },
    #[error("client set is empty")]
    EmptyClientSet,
    #[error("client index {0} out of range")]
    UnknownClient(usize),
    #[error("label distribution is all zero")]
    ZeroVector,
    #[error("label distributions have different class counts ({0} vs {1})")]
    ClassCountMismatch(usize, usize),
    #[error("bad IDX magic 0x{found:08x} in {path} (expected 0x{expected:08x})")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("truncated IDX file {0}")]
    TruncatedFile(PathBuf),
    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid dataset dimensions: {0}")]
    InvalidDims(String),

    // client
    #[error("client shard is empty")]
    EmptyShard,
    #[error("SCAFFOLD control variates require the plain SGD local optimizer")]
    ScaffoldRequiresSgd,

    // server
    #[error("no client gradients to aggregate")]
    EmptyRound,
    #[error("no multiplier for parameter group `{0}`")]
    MissingMultiplier(String),
    #[error("SCAFFOLD is not enabled on this server")]
    ScaffoldDisabled,

    // gsi
    #[error("GSI needs at least one client")]
    NoClients,
    #[error("GSI key mismatch: {0}")]
    KeyMismatch(String),
    #[error("aggregate gradient has zero norm")]
    ZeroAggregateGradient,

    // sampling
    #[error("cannot sample {r} distinct clients out of {n}")]
    BadRatio { r: usize, n: usize },
    #[error("sampler strategy is `{0}`, operation requires adafl")]
    WrongStrategy(String),

    // harness
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("need at least {needed} clients, got {got}")]
    TooFewClients { needed: usize, got: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("zero variance in {0}")]
    ZeroVariance(String),
    #[error("partition cannot supply the scenario: {0}")]
    NoSuchClients(String),
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_round(self, round: usize) -> Self {
        match self {
            e @ Error::Round { .. } => e,
            e => Error::Round {
                round,
                source: Box::new(e),
            },
        }
    }

    /// True for errors caused by the user's configuration rather than the run itself.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
