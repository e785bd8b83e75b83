use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config at `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("near-singular correction matrix (min eigenvalue {min_eig:.3e}); try the pseudoinverse variant")]
    NearSingular { min_eig: f64 },

    #[error("vacuous bound: B_D * delta_D = {product} >= 1")]
    VacuousBound { product: f64 },

    #[error("degenerate eigengap: {0}")]
    DegenerateGap(f64),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("no ratings left after filtering")]
    EmptyAfterFilter,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 2 validation, 3 numerical, 4 io.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_)
            | Error::Validation { .. }
            | Error::NotApplicable(_)
            | Error::EmptyAfterFilter => 2,
            Error::Singular(_)
            | Error::NearSingular { .. }
            | Error::VacuousBound { .. }
            | Error::DegenerateGap(_)
            | Error::Numerical(_) => 3,
            Error::Io(_) | Error::Format(_) | Error::Json(_) => 4,
        }
    }
}
