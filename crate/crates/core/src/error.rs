use std::path::PathBuf;

/// Errors raised anywhere in the scanner, reconstruction and attack pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("rotation is not orthonormal (re-orthonormalization moved an entry by {0:.3e})")]
    NonOrthonormalRotation(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("point is behind the device (depth {0:.6} mm)")]
    BehindCamera(f64),
    #[error("degenerate triangulation geometry (condition number {0:.3e})")]
    DegenerateGeometry(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("gamma fit diverged (residual rms {0:.4})")]
    FitDiverged(f64),
    #[error("invalid sample count k={k} for a cloud of {n} points")]
    InvalidK { k: usize, n: usize },
    #[error("degenerate cloud: all points coincide")]
    DegenerateCloud,
    #[error("training diverged at epoch {0}")]
    TrainingDiverged(usize),
    #[error("clouds share no provenance-matched points")]
    NoOverlap,
    #[error("every lambda search step failed")]
    AllStepsFailed,
    #[error("non-finite gradient at iteration {0}")]
    NonFiniteGradient(usize),
    #[error("fringe order change at camera pixel ({u}, {v}): column shift {shift}")]
    FringeOrderChange { u: usize, v: usize, shift: i64 },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
