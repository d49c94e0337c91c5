use std::path::PathBuf;

use thiserror::Error;

use crate::tokenizer::Modality;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("mask leaves a row with no allowed entries")]
    InvalidMask,

    #[error("backward already ran on this graph; run the forward pass again")]
    StaleGraph,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("target {id} at position {position} is {reason}")]
    Target {
        position: usize,
        id: u32,
        reason: &'static str,
    },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("text vocabulary must hold at least 256 byte tokens, got {0}")]
    VocabTooSmall(usize),

    #[error("token {id} does not belong to the {expected:?} vocabulary")]
    Modality { id: u32, expected: Modality },

    #[error("images must have 3 channels, got {0}")]
    Channels(usize),

    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    EmptyImage { width: usize, height: usize },

    #[error("token count mismatch: expected {expected}, got {found}")]
    TokenCount { expected: usize, found: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter {0} has no reparameterization branch")]
    MissingBranch(String),

    #[error("a merged (inference-only) model cannot be used here: {0}")]
    Merged(&'static str),

    #[error("an unmerged model cannot be used here: {0}")]
    Unmerged(&'static str),

    #[error("pmf support of {0} symbols exceeds the 65536 count budget")]
    SupportTooLarge(usize),

    #[error("pmf does not sum to one (sum = {0})")]
    PmfSum(f64),

    #[error("symbol {symbol} has zero count or lies outside the pmf")]
    Uncodable { symbol: u32 },

    #[error("bitstream is truncated")]
    Truncated,

    #[error("bitstream is corrupt")]
    Corrupt,

    #[error("format error: {0}")]
    Format(String),

    #[error("archive was written by model {archive:016x}, checkpoint is {checkpoint:016x}")]
    ModelMismatch { archive: u64, checkpoint: u64 },

    #[error("round trip failed for {0}")]
    RoundTrip(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
