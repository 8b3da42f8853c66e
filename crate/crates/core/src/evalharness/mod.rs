//! ROC analysis, bootstrap confidence intervals and the case-level
//! evaluation driver.

mod evaluate;
mod roc;

pub use evaluate::{
    evaluate_cases, read_roc_csv, roc_rows, trapezoid_auc, write_eval, EvalConfig, EvalReport, StudyEval, StudyStatus,
    DEFAULT_GRID, DEFAULT_RESAMPLES,
};
pub use roc::{bootstrap_ci, percentile, roc_auc, sens_spec_at, RocCurve, RocPoint};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least one positive and one negative (two of each for bootstrap)")]
    SingleClass,
    #[error("{0} scores for {1} labels")]
    LengthMismatch(usize, usize),
    #[error("non-finite score")]
    NonFiniteScore,
    #[error("bootstrap needs at least 100 resamples, got {0}")]
    TooFewResamples(usize),
    #[error("evaluation output: {0}")]
    Io(String),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;
