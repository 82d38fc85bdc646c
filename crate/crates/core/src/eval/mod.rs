//! Scoring formulas for the three dictionary tests, the file exchange with the
//! patching side, a bridge-free linear surrogate with an edit-test driver, and report output.

mod bridge;
mod report;
mod scores;
mod suite;
mod surrogate;

use thiserror::Error;

use crate::dictionary::DictError;
use crate::edit::EditError;
use crate::sae::SaeError;
use crate::store::StoreError;

pub use bridge::{
    necessity_replacements, read_response, reconstruction_replacements, validate_response,
    write_response, Condition, CrossSection, CrossSectionName, InterventionRequest,
    InterventionResult, RequestEntry, RequestManifest, BRIDGE_VERSION,
};
pub use edit_test::{
    counterfactual_pairs, dictionary_edit_test, greedy_edit_plans, greedy_edit_test, CounterfactualPair, EditRow,
    EditTestReport, FeatureSpace,
};
pub use report::{ReportFile, ReportWriter};
pub use scores::{
    bootstrap_ci, edit_agreement, necessity_score, normalize_agreement, normalize_edit_magnitude,
    sufficiency_score, EDIT_MAGNITUDE_CLIP,
};
pub use suite::{interp_causal_suite, SuitePoint, SuiteReport};
pub use surrogate::{LinearSurrogate, Readout};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate denominator: {0}")]
    Degenerate(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty prompt set")]
    Empty,
    #[error("dimension mismatch at {location}: expected {expected}, got {found}")]
    Dim {
        location: String,
        expected: usize,
        found: usize,
    },
    #[error("response invalid: {0}")]
    Response(String),
    #[error("invalid cross-section: {0}")]
    CrossSection(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Dict(#[from] DictError),
    #[error(transparent)]
    Sae(#[from] SaeError),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;
