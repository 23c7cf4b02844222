use thiserror::Error;

/// Errors raised anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid SH order {0}: must be even and non-negative")]
    InvalidShOrder(i64),

    #[error("direction {index} is not unit length (norm {norm})")]
    NonUnitDirection { index: usize, norm: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error(
        "singular SH normal matrix at order {order} with {directions} directions; \
         at least {required} well-spread directions are needed (or use lambda > 0)"
    )]
    SingularFit {
        order: usize,
        directions: usize,
        required: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("tensor is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("shape mismatch in {op}: {shapes}")]
    Shape { op: &'static str, shapes: String },

    #[error("timestep {t} out of range [1, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite guidance at t={t} (step {step}); trace so far:\n{trace}")]
    SamplerDiverged { t: usize, step: usize, trace: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: impl Into<String>) -> Self {
        Error::Shape {
            op,
            shapes: shapes.into(),
        }
    }
}
