use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("topology error: {0}")]
    Topology(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error(
        "power flow did not converge after {iterations} iterations (residual {residual:.3e} pu)"
    )]
    Divergence { iterations: usize, residual: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
