use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("mode error: {0}")]
    Mode(String),
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("picard iteration did not converge after {iterations} passes (last update {last})")]
    PicardStalled { iterations: usize, last: f64, trace: Vec<f64> },
    #[error("fixed-point iteration diverged at iteration {iteration}: residual {residual}")]
    Divergence { iteration: usize, residual: f64, trace: Vec<f64> },
    #[error("{agent} agent: {source}")]
    Agent { agent: &'static str, source: Box<Error> },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
