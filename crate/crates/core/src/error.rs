use thiserror::Error;

/// Errors surfaced by the synthesis toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("unknown atomic proposition `{0}`")]
    UnknownAtom(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("policy parameter violates causality mask at row {row}, col {col}")]
    MaskViolation { row: usize, col: usize },

    #[error("partition split refused: {0}")]
    SplitRefused(String),

    #[error("big-M bound is not finite for atom `{atom}` row {row}")]
    InfiniteBigM { atom: String, row: usize },

    #[error("formula must be in positive normal form (found a non-atomic negation)")]
    NotPnf,

    #[error("model is infeasible")]
    Infeasible,

    #[error("node limit exhausted after {0} nodes")]
    NodeLimit(usize),

    #[error("numerically singular basis at row {row}, col {col}")]
    SingularBasis { row: usize, col: usize },

    #[error("empty piece {0} in support estimate")]
    EmptyPiece(usize),

    #[error("unbounded state polyhedron: {0}")]
    UnboundedDomain(String),

    #[error("empty evaluation set")]
    EmptyEvaluation,

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("invalid input file: {0}")]
    InputFile(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
