use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the runtime.
///
/// The variant name is part of the public contract: bindings and the CLI
/// report it alongside the message (see [`Error::name`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checksum error: {0}")]
    Checksum(String),
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("unknown request id {0:?}")]
    UnknownRequest(String),
    #[error("slot for request {0:?} is busy")]
    SlotBusy(String),
    #[error("engine is busy serving request {0:?}")]
    EngineBusy(String),
    #[error("all entries of a softmax row are masked")]
    DegenerateRow,
    #[error("no kernel registered for impl_id {0:?}")]
    NoKernel(String),
    #[error("unknown impl_id {0:?} in dispatch overrides")]
    UnknownImpl(String),
    #[error("duplicate kernel impl_id {0:?}")]
    DuplicateImpl(String),
    #[error("invalid impl_params for {impl_id}: {reason}")]
    InvalidParams { impl_id: String, reason: String },
    #[error("no tuning candidates for context {0}")]
    NoCandidates(String),
    #[error("kernel {impl_id} cannot be captured into a step plan")]
    CaptureUnsupported { impl_id: String },
    #[error("step plan geometry drift: {0}")]
    GeometryDrift(String),
    #[error("kernel {impl_id} failed: {reason}")]
    Kernel { impl_id: String, reason: String },
    #[error("engine handle is closed")]
    Closed,
}

impl Error {
    /// Stable, CamelCase error name used across interface boundaries.
    pub fn name(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IoError",
            Error::Parse(_) => "ParseError",
            Error::Validation(_) => "ValidationError",
            Error::Format(_) => "FormatError",
            Error::Shape(_) => "ShapeError",
            Error::Checksum(_) => "ChecksumError",
            Error::ArchMismatch(_) => "ArchMismatch",
            Error::Capacity(_) => "CapacityError",
            Error::Range(_) => "RangeError",
            Error::UnknownRequest(_) => "UnknownRequest",
            Error::SlotBusy(_) => "SlotBusy",
            Error::EngineBusy(_) => "EngineBusy",
            Error::DegenerateRow => "DegenerateRow",
            Error::NoKernel(_) => "NoKernel",
            Error::UnknownImpl(_) => "UnknownImpl",
            Error::DuplicateImpl(_) => "DuplicateImpl",
            Error::InvalidParams { .. } => "InvalidParams",
            Error::NoCandidates(_) => "NoCandidates",
            Error::CaptureUnsupported { .. } => "CaptureUnsupported",
            Error::GeometryDrift(_) => "GeometryDrift",
            Error::Kernel { .. } => "KernelError",
            Error::Closed => "ClosedHandle",
        }
    }

    /// True for errors caused by configuration or input files rather than
    /// by a request at runtime.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Parse(_)
                | Error::Validation(_)
                | Error::Format(_)
                | Error::Shape(_)
                | Error::Checksum(_)
                | Error::ArchMismatch(_)
                | Error::UnknownImpl(_)
                | Error::InvalidParams { .. }
        )
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
