use thiserror::Error;

/// Errors produced by the feeder, solver, controller and training layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("cycle detected: line {from}->{to} closes a loop")]
    Cycle { from: usize, to: usize },

    #[error("bus {bus} is disconnected from the root")]
    Disconnected { bus: usize },

    #[error("duplicate line {from}->{to}")]
    DuplicateLine { from: usize, to: usize },

    #[error("nonpositive impedance on line {from}->{to} (r={r}, x={x})")]
    NonPositiveImpedance { from: usize, to: usize, r: f64, x: f64 },

    #[error("unknown bus id {0}")]
    UnknownBus(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("voltage collapse at sweep iteration {iteration} (bus {bus})")]
    VoltageCollapse { iteration: usize, bus: usize },

    #[error("power flow did not converge at t={t}")]
    PowerFlowDiverged { t: usize },

    #[error("invalid constants: {0}")]
    InvalidConstants(String),

    #[error("no contraction: rho = {0} >= 1")]
    NoContraction(f64),

    #[error("voltage limits unattainable at t={t}")]
    Infeasible { t: usize },

    #[error("activation tape does not match the channel layout")]
    TapeMismatch,

    #[error("equilibrium did not converge at t={t} (gap {gap:e} after {iterations} iterations)")]
    EquilibriumNotConverged { t: usize, gap: f64, iterations: usize },

    #[error("zeroth-order probe on column {column} failed: {source}")]
    ZeroOrderProbe {
        column: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("stability conditions violated: {0}")]
    Unstable(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn dim(what: impl Into<String>) -> Self {
        Error::Dimension(what.into())
    }
}
