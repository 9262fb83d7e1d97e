use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by data ingestion, preparation and model fitting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("csv error: {0}")]
    Csv(String),

    #[error("missing column `{0}` in header")]
    MissingColumn(String),

    #[error("duplicate row for subject `{id}` at occasion `{occasion}`")]
    DuplicateRow { id: String, occasion: String },

    #[error("invalid outcome `{value}` for subject `{id}` at occasion `{occasion}` (expected 0, 1 or NA)")]
    InvalidOutcome {
        id: String,
        occasion: String,
        value: String,
    },

    #[error("unknown occasion label `{0}`")]
    UnknownOccasion(String),

    #[error("covariate `{name}` missing for subject `{id}` at occasion `{occasion}`")]
    MissingCovariate {
        name: String,
        id: String,
        occasion: String,
    },

    #[error("covariate `{name}` varies within subject `{id}`; declare it time-varying")]
    InconstantCovariate { name: String, id: String },

    #[error("no completers in dataset")]
    NoCompleters,

    #[error("formula error: {0}")]
    Formula(String),

    #[error("design is collinear: column `{0}` is linearly dependent on earlier columns")]
    Collinear(String),

    #[error("separation detected: coefficient for `{column}` exceeded {bound} on the logit scale")]
    Separation { column: String, bound: f64 },

    #[error("{what} did not converge after {iterations} iterations")]
    NonConvergence { what: String, iterations: usize },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("correlation parameter {alpha} outside the validity region for {structure} (block size {n})")]
    InvalidAlpha {
        alpha: f64,
        structure: String,
        n: usize,
    },

    #[error("degenerate fitted probability {0}; must lie strictly in (0, 1)")]
    DegenerateProbability(f64),

    #[error("invalid input: {0}")]
    Invalid(String),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}
