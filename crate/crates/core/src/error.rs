use std::path::PathBuf;

use thiserror::Error;

use crate::scene::ObjectRole;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate reference frame: viewpoint and source coincide in the ground plane")]
    DegenerateFrame,
    #[error("degenerate target: target coincides with source in the ground plane")]
    DegenerateTarget,
    #[error("layout has no {0:?} object")]
    MissingObject(ObjectRole),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("({x}, {y}) lies outside the terrain extent")]
    OutOfBounds { x: f64, y: f64 },
    #[error("attempt budget exhausted: {accepted} of {requested} samples after {attempts} attempts")]
    BudgetExhausted {
        requested: usize,
        accepted: usize,
        attempts: u64,
    },
    #[error("unknown environment `{name}` (known: {})", known.join(", "))]
    UnknownEnvironment { name: String, known: Vec<String> },
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("schema mismatch: found version {found}, expected {expected}")]
    SchemaMismatch { found: u32, expected: u32 },
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input")]
    EmptyInput,
    #[error("stale cache: parameters changed since the forward pass")]
    StaleCache,
    #[error("empty {0} fold")]
    EmptyFold(&'static str),
    #[error("missing features for sample {sample_id} ({})", path.display())]
    MissingFeatures { sample_id: String, path: PathBuf },
    #[error("degenerate variance: series is constant")]
    DegenerateVariance,
    #[error("category {0} occupies no tokens")]
    EmptyCategory(u16),
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// Stable machine-readable tag, used by the CLI and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateFrame => "degenerate_frame",
            Error::DegenerateTarget => "degenerate_target",
            Error::MissingObject(_) => "missing_object",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::OutOfBounds { .. } => "out_of_bounds",
            Error::BudgetExhausted { .. } => "budget_exhausted",
            Error::UnknownEnvironment { .. } => "unknown_environment",
            Error::UnknownCategory(_) => "unknown_category",
            Error::SchemaMismatch { .. } => "schema_mismatch",
            Error::CorruptFile(_) => "corrupt_file",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::EmptyInput => "empty_input",
            Error::StaleCache => "stale_cache",
            Error::EmptyFold(_) => "empty_fold",
            Error::MissingFeatures { .. } => "missing_features",
            Error::DegenerateVariance => "degenerate_variance",
            Error::EmptyCategory(_) => "empty_category",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }
}
