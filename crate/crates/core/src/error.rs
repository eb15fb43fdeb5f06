use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("grid too coarse along {axis}: {points} points, at least {required} required")]
    GridTooCoarse {
        axis: String,
        points: usize,
        required: usize,
    },

    #[error("invalid exponents: {0}")]
    InvalidExponents(String),

    #[error("degenerate diffusion: smallest eigenvalue of sigma sigma^T is {min_eigenvalue:e} at node {node}")]
    Degenerate { min_eigenvalue: f64, node: usize },

    #[error("linear solve failed at time step {step}: {reason}")]
    Solver { step: usize, reason: String },

    #[error("division guard: {0}")]
    DivisionGuard(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("transformation stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<LabError>,
    },

    #[error("stage `{stage}`: {source}")]
    InStage {
        stage: String,
        #[source]
        source: Box<LabError>,
    },

    #[error("no horizon certificate: {0}")]
    NoCertificate(String),

    #[error("degenerate pair: {0}")]
    DegeneratePair(String),

    #[error("simulation blew up at step {step}")]
    BlowUp { step: usize },

    #[error("lemma inapplicable: {0}")]
    LemmaInapplicable(String),

    #[error("scenario invalid: {0}")]
    ScenarioInvalid(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown format `{0}` (expected json, csv or text)")]
    UnknownFormat(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub(crate) fn at_stage(self, stage: usize) -> Self {
        LabError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

impl LabError {
    /// Validation and parse failures, as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        match self {
            LabError::Validation(_)
            | LabError::Parse(_)
            | LabError::UnknownFormat(_)
            | LabError::InvalidExponents(_) => true,
            LabError::InStage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
