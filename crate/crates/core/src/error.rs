use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("state {state:?} lies outside every region of the system")]
    Domain { state: Vec<f64> },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("problem infeasible: {0}")]
    Infeasible(String),
    #[error("LMI system infeasible; most violated block {block} (min eigenvalue {min_eig:.3e})")]
    LmiInfeasible { block: usize, min_eig: f64 },
    #[error("barrier synthesis failed: {0}")]
    Synthesis(String),
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
    #[error("labeling failed at sample {index} (x={x:?}, u={u:?}): {source}")]
    Labeling {
        index: usize,
        x: Vec<f64>,
        u: Vec<f64>,
        #[source]
        source: Box<Error>,
    },
    #[error("config digest mismatch: model {model:016x}, dataset {dataset:016x}")]
    DigestMismatch { model: u64, dataset: u64 },
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("external input exhausted after {0} steps")]
    StubExhausted(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("toml error: {0}")]
    Toml(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
