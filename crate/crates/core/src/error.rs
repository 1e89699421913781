use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty shape")]
    EmptyShape,
    #[error("zero extent in shape {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("rank {0} exceeds the supported maximum of 4")]
    RankTooLarge(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("channel mismatch: input has {input} channels, kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error("non-integral output extent: ({extent} + 2*{pad} - {kernel}) is not divisible by stride {stride}")]
    NonIntegralExtent {
        extent: usize,
        pad: usize,
        kernel: usize,
        stride: usize,
    },
    #[error("unsupported kernel size {0}x{1}; supported sizes are 1x1, 3x3, 1x3 and 3x1")]
    UnsupportedKernel(usize, usize),
    #[error("pooling window {window} larger than input {height}x{width}")]
    WindowTooLarge {
        window: usize,
        height: usize,
        width: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload at byte offset {0}")]
    Truncated(usize),
    #[error("duplicate entry name {0:?}")]
    DuplicateName(String),
    #[error("unknown dtype code {0}")]
    UnknownDType(u8),
    #[error("missing entry {0:?}")]
    MissingEntry(String),
    #[error("dtype mismatch for {0:?}")]
    DTypeMismatch(String),

    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("missing tape: backward called without a completed forward pass")]
    MissingTape,
    #[error("invalid fusion: {0}")]
    Fusion(String),

    #[error("dataset error: {0}")]
    Data(String),
    #[error("record size mismatch: file of {len} bytes is not a multiple of {record} (incomplete record at byte offset {offset})")]
    RecordSize {
        len: usize,
        record: usize,
        offset: usize,
    },

    #[error("config line {line}: {msg}")]
    ConfigSyntax { line: usize, msg: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("duplicate config key {key:?} on lines {first} and {second}")]
    DuplicateKey {
        key: String,
        first: usize,
        second: usize,
    },
    #[error("invalid value for {key:?}: {msg}")]
    InvalidValue { key: String, msg: String },

    #[error("retrieval error: {0}")]
    Retrieval(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Prefixes shape-like errors with the graph node where they happened.
    pub(crate) fn at_node(self, node: &str) -> Self {
        match self {
            Error::Io(_) | Error::Graph(_) | Error::MissingTape | Error::LabelOutOfRange { .. } => self,
            other => Error::Shape(format!("at node {node:?}: {other}")),
        }
    }

    /// True for errors caused by invalid user input rather than a failure during execution.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::ConfigSyntax { .. }
                | Error::UnknownKey(_)
                | Error::DuplicateKey { .. }
                | Error::InvalidValue { .. }
                | Error::Graph(_)
        )
    }
}
