use thiserror::Error;

use crate::denoiser::Checkpoint;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),
    #[error("sequence of {len} tokens exceeds capacity {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate time: gamma_s = 1 for an unmasked source token")]
    DegenerateTime,
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("cache overflow: {committed} committed + {block} new > {max_len}")]
    CacheOverflow {
        committed: usize,
        block: usize,
        max_len: usize,
    },
    #[error("enumeration needs d <= {max}, got {d}")]
    TooLong { d: usize, max: usize },
    #[error("no masked positions in the active block")]
    NoMaskedPositions,
    #[error("training diverged at step {step}")]
    DivergenceDetected {
        step: usize,
        last_good: Box<Checkpoint>,
    },
    #[error("on-policy collapse at update {update}: pass rate {pass_rate:.3} vs start {start:.3}")]
    CollapseDetected {
        update: usize,
        pass_rate: f64,
        start: f64,
    },
    #[error("missing log: {0}")]
    MissingLog(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
