use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: subject {subject_id} is not present in the subject file")]
    UnknownSubject {
        path: PathBuf,
        line: usize,
        subject_id: u64,
    },

    #[error("invalid cohort: {0}")]
    InvalidCohort(String),

    #[error("labels contain a single class")]
    DegenerateLabels,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("no events under the chosen event flavor")]
    NoEvents,

    #[error("no stratum carries information about the treatment effect")]
    NoInformation,

    #[error("could not build folds with both classes after {0} attempts")]
    FoldConstruction(usize),

    #[error("degenerate instrument: {0}")]
    DegenerateIv(String),

    #[error("no treated subject found a comparator within the caliper")]
    NoOverlap,

    #[error("at least two negative controls are required, got {0}")]
    InsufficientControls(usize),

    #[error("no converged estimates to summarize")]
    NoConvergedEstimates,

    #[error("missing report input: {0}")]
    MissingInput(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
