use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A NaN or infinity appeared in a forward value.
    #[error("non-finite value produced by {op}{}", .context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default())]
    NonFinite {
        op: &'static str,
        context: Option<String>,
    },

    /// The caller asked for something the API does not allow.
    #[error("usage error: {0}")]
    Usage(String),

    /// Bad magic, unsupported version or otherwise unparseable input.
    #[error("format error: {0}")]
    Format(String),

    /// The file is well-formed up to a point and then ends or contradicts itself.
    #[error("corrupt data: {0}")]
    Corruption(String),

    /// Decoded data breaks a domain invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    /// Attaches location context (step index, epoch/batch) to a numeric fault.
    pub fn with_context(self, ctx: impl Into<String>) -> Self {
        match self {
            Error::NonFinite { op, context } => {
                let ctx = ctx.into();
                let context = match context {
                    Some(inner) => format!("{ctx}, {inner}"),
                    None => ctx,
                };
                Error::NonFinite {
                    op,
                    context: Some(context),
                }
            }
            other => other,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Dimension { .. } => 1,
            Error::Format(_) | Error::Corruption(_) | Error::Validation(_) | Error::Io(_) => 2,
            Error::NonFinite { .. } => 3,
        }
    }
}
