use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the segmentation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes at pixel {index}")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        index: usize,
    },

    #[error("mask column {column} is not stacked (class {below} below class {above} at row {row})")]
    NotStacked {
        column: usize,
        row: usize,
        above: usize,
        below: usize,
    },

    #[error("boundaries not monotone in column {column}: b[{index}] = {upper} > b[{next}] = {lower}", next = .index + 1)]
    NotMonotone {
        column: usize,
        index: usize,
        upper: f64,
        lower: f64,
    },

    #[error("negative thickness {value} at layer {layer}, column {column}")]
    NegativeThickness {
        layer: usize,
        column: usize,
        value: f64,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("backward called before any forward pass was recorded")]
    NoForward,

    #[error("node {0} is not part of this tape")]
    UnknownNode(usize),

    #[error("container format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("incompatible weights: {0}")]
    Incompatible(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short name of the variant, for machine-readable messages.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument { .. } => "invalid_argument",
            Error::Config(_) => "config",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::NotStacked { .. } => "not_stacked",
            Error::NotMonotone { .. } => "not_monotone",
            Error::NegativeThickness { .. } => "negative_thickness",
            Error::NonFinite(_) => "non_finite",
            Error::NoForward => "no_forward",
            Error::UnknownNode(_) => "unknown_node",
            Error::Format { .. } => "format",
            Error::Incompatible(_) => "incompatible",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
