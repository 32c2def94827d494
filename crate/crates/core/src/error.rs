use thiserror::Error;

/// Errors raised anywhere in the observer pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid edge ({0}, {1}): self-loops are not allowed")]
    InvalidEdge(usize, usize),

    #[error("agent index {index} out of range for a network of {n_agents} agents")]
    InvalidAgentIndex { index: usize, n_agents: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionError {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid Gramian window: k = {k} is smaller than K = {window}")]
    InvalidWindow { k: usize, window: usize },

    #[error("dynamics block of agent {agent} is singular at step {k}")]
    SingularDynamics { agent: usize, k: usize },

    #[error("measurement does not match the sensing topology: {0}")]
    TopologyMismatch(String),

    #[error("matrix is not symmetric positive definite ({0})")]
    NotSpd(String),

    #[error("internal invariant violated: {0}")]
    InternalInvariantViolation(String),

    #[error("synchronous protocol violated: {0}")]
    ProtocolError(String),

    #[error("agent {agent} has nonzero local innovation but singular local information")]
    InconsistentLocalInfo { agent: usize },

    #[error("no observable scenario found after {attempts} attempts")]
    UnobservableScenario { attempts: usize },

    #[error("estimate diverged: non-finite value at step {k}")]
    Diverged { k: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("step {k}: {source}")]
    AtStep {
        k: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn at_step(self, k: usize) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep {
                k,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionError {
            context,
            expected,
            got,
        })
    }
}
