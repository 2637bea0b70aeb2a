use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-simple zero near {re:.6}{im:+.6}i")]
    NonSimpleZero { re: f64, im: f64 },
    #[error("branch tracking failed after {0} subdivisions")]
    BranchTrackingFailure(usize),
    #[error("point lies on a zero of the differential")]
    ZeroOfDifferential,
    #[error("invalid differential: {0}")]
    InvalidDifferential(String),
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("ray trace corrector diverged at step {0}")]
    TraceDivergence(usize),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("path crosses a ray tangentially near {re:.6}{im:+.6}i")]
    TangentialCrossing { re: f64, im: f64 },
    #[error("integrator step underflow at s = {0}")]
    StepUnderflow(f64),
    #[error("integrator error budget exceeded ({0:e})")]
    ToleranceFailure(f64),
    #[error("events and factors disagree: {0}")]
    FactorMismatch(String),
    #[error("connection is not unipotent (diagonal deviation {0:e})")]
    NonUnipotentConnection(f64),
    #[error("ladder needs at least 4 entries, got {0}")]
    LadderTooShort(usize),
    #[error("dominance tie on segment {segment} (margin {margin:e})")]
    DominanceTie { segment: usize, margin: f64 },
    #[error("sector angle {0} too wide for the model basis")]
    SectorTooWide(f64),
    #[error("unsupported order n = {0}")]
    UnsupportedOrder(usize),
    #[error("new crossings still appear after {0} generations")]
    GenerationOverflow(usize),
    #[error("no zero-avoiding route found")]
    RoutingFailure,
}

pub type Result<T> = std::result::Result<T, Error>;
