use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Estimation pipeline stage, used to label propagated failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Tuning,
    FirstStage,
    SecondStage,
    ErrorVariance,
    Variance,
    Inference,
    Jackknife,
    Partialling,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Tuning => "penalty tuning",
            Stage::FirstStage => "first stage",
            Stage::SecondStage => "second stage",
            Stage::ErrorVariance => "error variance",
            Stage::Variance => "estimator variance",
            Stage::Inference => "inference",
            Stage::Jackknife => "jackknife",
            Stage::Partialling => "control partialling",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot open {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid value at row {row}, column {column}: {value:?}")]
    Cell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("invalid data: {0}")]
    Data(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("weak identification: {0}")]
    WeakIdentification(String),
    #[error("saturated fit: {0}")]
    SaturatedFit(String),
    #[error("leverage saturation at observation {index} (1 - h = {slack:e})")]
    LeverageSaturation { index: usize, slack: f64 },
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("degenerate diagnostic: {0}")]
    Degenerate(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("panel failed: {failed} of {total} replications failed")]
    PanelFailed { failed: usize, total: usize },
}

impl Error {
    pub fn at(self, stage: Stage) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, with stage labels stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn is_weak_identification(&self) -> bool {
        matches!(self.root(), Error::WeakIdentification(_))
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
