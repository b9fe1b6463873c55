use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index out of range: {0}")]
    Range(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("broken lattice: no surviving assignment at position {position}")]
    BrokenLattice { position: usize },
    #[error("threshold {tau} would prune everything (global max {max})")]
    PrunesEverything { tau: f64, max: f64 },
    #[error("cascade breakdown: every state of node {node} was filtered")]
    Breakdown { node: usize },
    #[error("output space too large for brute force: {0} outputs")]
    TooLarge(u128),
    #[error("non-finite weight at index {index} after step {step}")]
    NonFinite { index: usize, step: u64 },
    #[error("empty input: {0}")]
    Empty(String),
}
