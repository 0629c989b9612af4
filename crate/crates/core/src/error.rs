use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("target unreachable: distance {distance:.6} m outside [{inner:.6}, {outer:.6}] (clamp distance {clamp_distance:.3e} m)")]
    Unreachable {
        distance: f64,
        inner: f64,
        outer: f64,
        clamp_distance: f64,
    },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("null conditioning passed where a conditional one is required ({0})")]
    NullConditioning(&'static str),

    #[error("non-finite sampler state at step {step}")]
    SamplerDiverged { step: usize },

    #[error("format error: {0}")]
    Format(String),
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            expected,
            actual,
        })
    }
}
