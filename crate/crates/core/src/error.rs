//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape {shape:?} does not match buffer of length {len}")]
    ShapeData { shape: Vec<usize>, len: usize },

    #[error("{op}: shape mismatch, lhs {lhs} vs rhs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("conv2d: kernel {kernel} larger than input {input}")]
    KernelTooLarge { kernel: String, input: String },

    #[error("backward: loss must be scalar, got shape {shape}")]
    NonScalarLoss { shape: String },

    #[error("{what}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("sequence too short: need at least {needed} patches, got {got}")]
    SequenceTooShort { needed: usize, got: usize },

    #[error("empty sequence where at least one element is required")]
    EmptySequence,

    #[error("sample {id} has no label but a labeled operation was requested")]
    MissingLabel { id: u64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("context length mismatch: aggregator expects {expected} latents, got {got}")]
    WrongContextLength { expected: usize, got: usize },

    #[error("negative pool too small: need {needed}, only {available} eligible positions")]
    PoolTooSmall { needed: usize, available: usize },

    #[error("contrastive task references sample {sample_id} which is not in the batch")]
    TaskRefNotInBatch { sample_id: u64 },

    #[error("vector is not a probability simplex (sum {sum})")]
    InvalidSimplex { sum: f64 },

    #[error("patch grid: (image {image} - patch {patch}) not divisible by stride {stride}")]
    GridDivisibility {
        image: usize,
        patch: usize,
        stride: usize,
    },

    #[error("patch shape {got} does not match the encoder's expected {expected}")]
    PatchShape { expected: String, got: String },

    #[error("split fraction {fraction} yields no labeled items (dataset of {items})")]
    DegenerateSplit { fraction: f64, items: usize },

    #[error("invalid {what}: {detail}")]
    InvalidConfig { what: &'static str, detail: String },

    #[error("empty document")]
    EmptyDocument,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("both labeled and unlabeled batches are empty")]
    BothBatchesEmpty,

    #[error("non-finite loss in term '{term}' (value {value})")]
    NonFiniteLoss { term: String, value: f64 },

    #[error("checkpoint: bad magic (not a checkpoint file)")]
    CheckpointMagic,

    #[error("checkpoint: version {got} unsupported (expected {expected})")]
    CheckpointVersion { expected: u32, got: u32 },

    #[error("checkpoint: checksum mismatch, file is corrupt or truncated")]
    CheckpointChecksum,

    #[error("checkpoint: truncated record ({detail})")]
    CheckpointTruncated { detail: String },

    #[error("checkpoint incompatible with the configured model: {detail}")]
    CheckpointIncompatible { detail: String },

    #[error("idx file: {detail}")]
    IdxFormat { detail: String },

    #[error("unknown verification suite '{name}'")]
    UnknownSuite { name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-parsable code for CLI reporting.
    pub fn code(&self) -> &'static str {
        use Error::*;
        match self {
            ShapeData { .. } | ShapeMismatch { .. } | KernelTooLarge { .. }
            | NonScalarLoss { .. } | IndexOutOfRange { .. } | DimensionMismatch { .. } => "E_SHAPE",
            SequenceTooShort { .. } | EmptySequence | MissingLabel { .. }
            | LabelOutOfRange { .. } | WrongContextLength { .. } | PoolTooSmall { .. }
            | InvalidSimplex { .. } | GridDivisibility { .. } | PatchShape { .. }
            | DegenerateSplit { .. } | EmptyDocument | EmptyDataset | BothBatchesEmpty
            | TaskRefNotInBatch { .. } | IdxFormat { .. } => "E_DATA",
            InvalidConfig { .. } => "E_CONFIG",
            NonFiniteLoss { .. } => "E_NAN",
            CheckpointMagic | CheckpointVersion { .. } | CheckpointChecksum
            | CheckpointTruncated { .. } | CheckpointIncompatible { .. } => "E_CKPT",
            UnknownSuite { .. } => "E_VERIFY",
            Io(_) | Json(_) => "E_IO",
        }
    }
}
