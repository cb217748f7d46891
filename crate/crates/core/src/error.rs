use alloc::string::String;

/// Errors raised by the SPD layers, attention module, network and optimizer.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("matrix is not symmetric (max |A_ij - A_ji| = {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty input")]
    Empty,
    #[error("weights sum to {sum}, expected 1")]
    WeightSum { sum: f64 },
    #[error("weight {index} is not positive ({value})")]
    NonPositiveWeight { index: usize, value: f64 },
    #[error("tape already consumed by a previous backward call")]
    TapeReused,
    #[error("eigenvalue gap {gap:e} below degeneracy threshold {threshold:e}")]
    DegenerateSpectrum { gap: f64, threshold: f64 },
    #[error(
        "E = {stages} does not support the attention module: Q/K/V selection needs an odd E > 4 (x = 1) \
         or an even E > 4 (x = 2) so that |K| = |V| = (E - x)/2 >= 2"
    )]
    UnsupportedDepth { stages: usize },
    #[error("invalid number of stacked autoencoders: {stages}")]
    InvalidDepth { stages: usize },
    #[error("non-finite values in {location}")]
    NonFinite { location: String },
    #[error("QR retraction lost rank at column {column} (|R_ii| = {value:e})")]
    RetractionFailure { column: usize, value: f64 },
    #[error("label {label} outside 1..={classes}")]
    InvalidLabel { label: u32, classes: usize },
    #[error("invalid `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("precondition violated: {0}")]
    Precondition(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;
