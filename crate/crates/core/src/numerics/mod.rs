//! Numerical substrate: vectors, a small dense network with hand-written
//! reverse-mode gradients, Adam, and seeded sampling.

mod adam;
mod mlp;
pub mod rng;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use mlp::{
    backward_batch, forward_batch, mlp_backward, mlp_forward, Activation, DenseLayer,
    ForwardCache, MlpParams, MlpSpec,
};
pub use rng::{derive_seed, seeded_normal, SeededRng};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A non-empty vector of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RealVec(Vec<f64>);

impl RealVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("RealVec must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("RealVec"));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "RealVec dimension must be positive");
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for RealVec {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for RealVec {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RealVec> for Vec<f64> {
    fn from(v: RealVec) -> Vec<f64> {
        v.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

/// `a + scale * b`, elementwise.
pub fn axpy(a: &[f64], scale: f64, b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + scale * y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
