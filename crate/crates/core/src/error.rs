use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("invalid noise lattice: {0}")]
    InvalidLattice(String),

    #[error("invalid atom space: {0}")]
    InvalidAtoms(String),

    #[error("instance too large: {what} needs {needed} entries, budget is {budget}")]
    TooLarge {
        what: String,
        needed: usize,
        budget: usize,
    },

    #[error("payoff is missing atoms at step {step}: expected {expected} values, got {got}")]
    MissingAtom {
        step: usize,
        expected: usize,
        got: usize,
    },

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("not measurable: {0}")]
    NotMeasurable(String),

    #[error("invalid control: {0}")]
    InvalidControl(String),

    #[error("invalid lambda family: {0}")]
    Lambda(String),

    #[error("invalid intensity: {0}")]
    Intensity(String),

    #[error("cannot reach distance {requested} under the intensity ceiling; best achievable bound is {achievable}")]
    ApproxInfeasible { requested: f64, achievable: f64 },

    #[error("non-finite {what} at step {step}, particle {particle}")]
    NonFinite {
        what: &'static str,
        step: usize,
        particle: usize,
    },

    #[error("penalised solutions not monotone: drop of {violation:e} at step {step}, node {node}")]
    Monotonicity {
        violation: f64,
        step: usize,
        node: usize,
    },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("unknown model family `{0}`")]
    UnknownFamily(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
