use thiserror::Error;

/// Errors produced by the estimation pipeline.
///
/// Variants split into input/format problems and numerical failures; the CLI
/// maps the latter to a distinct exit status (see [`Error::is_numerical`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("degenerate observation: {0}")]
    DegenerateObservation(String),

    #[error("insufficient views: need at least {needed}, got {got}")]
    InsufficientViews { needed: usize, got: usize },

    #[error("ambiguous least-squares solution: smallest singular values {0:e} and {1:e} coincide")]
    AmbiguousSolution(f64, f64),

    #[error("recovered quadric is not an ellipsoid: {0}")]
    NonEllipsoid(String),

    #[error("outside the domain of the logarithm: {0}")]
    Domain(String),

    #[error("empty observation: {0}")]
    EmptyObservation(String),

    #[error("optimization diverged at iteration {iteration}: error {error:e} exceeds 10x the initial {initial:e}")]
    Divergence {
        iteration: usize,
        error: f64,
        initial: f64,
    },

    #[error("non-finite loss in batch {batch}: {detail}")]
    NonFinite { batch: usize, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateObservation(_)
                | Error::InsufficientViews { .. }
                | Error::AmbiguousSolution(..)
                | Error::NonEllipsoid(_)
                | Error::Domain(_)
                | Error::EmptyObservation(_)
                | Error::Divergence { .. }
                | Error::NonFinite { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
