use alloc::string::String;

/// Errors raised anywhere in the modelling pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("duplicate term `{term}` at byte {offset}")]
    DuplicateTerm { term: String, offset: usize },

    #[error("response `{name}` used as a predictor at byte {offset}")]
    ResponseAsPredictor { name: String, offset: usize },

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("column `{column}` is categorical and cannot be used as {role}")]
    CategoricalColumn { column: String, role: &'static str },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error(
        "fixed-effect design (1, X) is rank deficient: numerical rank {rank} < {columns} columns"
    )]
    RankDeficient { rank: usize, columns: usize },

    #[error("degenerate model frame: {0}")]
    DegenerateFrame(String),

    #[error("matrix factorization failed: {0}")]
    Factorization(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bootstrap aborted: {failed} of {total} replicates failed (limit {limit:.0}%)")]
    BootstrapFailures {
        failed: usize,
        total: usize,
        limit: f64,
    },
}

pub type Result<T> = core::result::Result<T, Error>;
