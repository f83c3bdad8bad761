use thiserror::Error;

/// Errors raised while reading, validating or analysing a case.
#[derive(Debug, Error)]
pub enum CaseError {
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("topology error: {0}")]
    Topology(String),
    #[error("unit error: {0}")]
    Unit(String),
    #[error("unknown bus {0}")]
    UnknownBus(u32),
    #[error("unknown line {0}")]
    UnknownLine(String),
    #[error("network is disconnected: {0}")]
    Disconnected(String),
    #[error("case failed validation with {} diagnostic(s): {}", .0.len(), .0.join("; "))]
    Invalid(Vec<String>),
}

/// Errors raised by the conic program builder and solver wrapper.
#[derive(Debug, Error)]
pub enum KernelError {
    #[error("duplicate name `{0}` in program")]
    DuplicateName(String),
    #[error("unknown variable index {0}")]
    UnknownVariable(usize),
    #[error("unknown constraint `{0}`")]
    UnknownConstraint(String),
    #[error("invalid bounds on `{0}`: lower {1} > upper {2}")]
    InvalidBounds(String, f64, f64),
    #[error("non-finite coefficient in `{0}`")]
    NonFinite(String),
    #[error("quadratic objective terms can only be evaluated, not solved")]
    QuadraticObjective,
    #[error("operation requires a linear program but `{0}` has cone constraints")]
    NotLinear(String),
    #[error("solver setup failed: {0}")]
    Setup(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Errors raised by the market, attack and cascade layers.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{program} is infeasible")]
    Infeasible { program: String },
    #[error("{program} is unbounded")]
    Unbounded { program: String },
    #[error("{program} failed numerically (primal res {primal:.3e}, dual res {dual:.3e}, gap {gap:.3e})")]
    Numeric {
        program: String,
        primal: f64,
        dual: f64,
        gap: f64,
    },
}

impl ModelError {
    pub fn is_infeasible(&self) -> bool {
        matches!(self, ModelError::Infeasible { .. })
    }
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
