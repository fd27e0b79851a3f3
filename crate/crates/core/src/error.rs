use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown domain `{0}`")]
    UnknownDomain(String),
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("mesh invariant violated ({invariant}): {detail}")]
    MeshInvariant {
        invariant: &'static str,
        detail: String,
    },
    #[error("mesh file parse error at line {line}: {msg}")]
    MeshParse { line: usize, msg: String },
    #[error("coefficient has no entry for region {0}")]
    MissingRegion(i32),
    #[error("coefficient for region {region} is not uniformly elliptic: {detail}")]
    NotElliptic { region: i32, detail: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is singular or not positive definite: {0}")]
    Singular(String),
    #[error("iteration did not converge within {max_iter} iterations (relative residual {rel_residual:e})")]
    NotConverged { max_iter: usize, rel_residual: f64 },
    #[error("non-positive curvature {0:e} encountered (operator or preconditioner not SPD)")]
    NonPositiveCurvature(f64),
    #[error("dimension {dim} exceeds the cap {cap} for the dense path")]
    DimensionCap { dim: usize, cap: usize },
    #[error("KKT system is rank deficient: subspaces do not cover the fine space")]
    RankDeficient,
    #[error("exact solution required but not available for problem `{0}`")]
    MissingExactSolution(String),
    #[error("reference mesh is not a refinement of the solution mesh")]
    NonNested,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("all indicators are zero")]
    AllZeroIndicators,
    #[error("spaces live on different meshes")]
    MeshMismatch,
    #[error("configuration error in field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 2 for input and configuration problems, 3 for
    /// violated invariants, 4 for solver failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::UnknownDomain(_)
            | Error::UnknownProblem(_)
            | Error::MeshParse { .. }
            | Error::Config { .. }
            | Error::InvalidArgument(_)
            | Error::Io(_) => 2,
            Error::Singular(_) | Error::NotConverged { .. } | Error::NonPositiveCurvature(_) => 4,
            _ => 3,
        }
    }
}
