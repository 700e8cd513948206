use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on {axis}: expected {expected}, got {got}")]
    Dim {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f32 },

    #[error("bad tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, axis: &'static str, expected: usize, got: usize) -> Error {
    Error::Dim {
        op,
        axis,
        expected,
        got,
    }
}

pub(crate) fn ensure_dim(
    op: &'static str,
    axis: &'static str,
    expected: usize,
    got: usize,
) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(dim_err(op, axis, expected, got))
    }
}
