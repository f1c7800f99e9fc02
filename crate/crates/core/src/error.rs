use thiserror::Error;

/// Errors produced by grid construction, estimation, solving and planning.
#[derive(Debug, Error)]
pub enum LdmError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("cell index {index} out of range for grid with {total} cells")]
    IndexOutOfRange { index: usize, total: usize },

    #[error("point is outside the grid domain on axis {axis} (value {value})")]
    OffGrid { axis: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("fields are defined on different grids")]
    GridMismatch,

    #[error("field has role {got}, expected {expected}")]
    WrongRole { expected: String, got: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dataset record {row} lies outside the declared bounds")]
    RecordOutOfBounds { row: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("rank-deficient design matrix: column `{column}` is linearly dependent on earlier columns")]
    RankDeficient { column: String },

    #[error("singular normal equations in least-squares fit")]
    SingularSystem,

    #[error("Riccati iteration did not converge after {iterations} iterations (last change {last_change:e})")]
    RiccatiDiverged { iterations: usize, last_change: f64 },

    #[error("LDM value iteration did not converge within {sweeps} sweeps (final residual {final_residual:e})")]
    NotConverged {
        sweeps: usize,
        final_residual: f64,
        residuals: Vec<f64>,
    },

    #[error("problem too large for exhaustive enumeration: {0}")]
    TooLarge(String),

    #[error("minimum of the LDM is at cell {actual}, not at the declared equilibrium cell {declared}")]
    NotMinimizer { declared: usize, actual: usize },

    #[error("bound form not applicable: {0}")]
    BoundNotApplicable(String),

    #[error("unknown kind `{0}`")]
    UnknownKind(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LdmError>;
