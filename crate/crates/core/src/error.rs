use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("topology error: {0}")]
    Topology(String),

    #[error("unknown bus reference: {0}")]
    Reference(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("malformed droop curve: {0}")]
    MalformedCurve(String),

    #[error("power flow did not converge after {iterations} iterations (last mismatch {mismatch:.3e} pu)")]
    Convergence { iterations: usize, mismatch: f64 },

    #[error("voltage collapse: |v| = {v_mag:.4} pu at bus {bus}")]
    Infeasible { bus: String, v_mag: f64 },

    #[error("simulation failed at step {step}: {source}")]
    Simulation {
        step: usize,
        #[source]
        source: Box<CoreError>,
    },

    #[error("range error: {0}")]
    Range(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
