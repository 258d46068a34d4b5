use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KronError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("{what} is not positive definite (smallest Cholesky pivot {pivot:.3e})")]
    NotPositiveDefinite { what: String, pivot: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix of {rows} rows exceeds the dense materialization cap of {cap}")]
    SizeGuard { rows: usize, cap: usize },

    #[error("degenerate distance constants for factor {factor}: d_min = d_max = {value}")]
    DegenerateConstants { factor: usize, value: f64 },

    #[error("degenerate residuals: weighted residual sum of squares {0:.3e} underflows")]
    DegenerateResiduals(f64),

    #[error("design matrix is rank deficient (rank {rank} < {q})")]
    RankDeficient { rank: usize, q: usize },

    #[error("input error: {0}")]
    Input(String),

    #[error("evaluation failed: {0}")]
    Evaluation(String),
}

impl KronError {
    /// Prefix the "what" of a positive-definiteness failure with extra context
    /// such as the subject id.
    pub fn in_context(self, ctx: &str) -> Self {
        match self {
            KronError::NotPositiveDefinite { what, pivot } => KronError::NotPositiveDefinite {
                what: format!("{ctx}: {what}"),
                pivot,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, KronError>;
