//! Closed-form velocity fields. They stand in for trained networks wherever a
//! test needs a field whose behavior is known exactly.

use super::{Conditioning, VelocityField};
use crate::error::check_dim;
use crate::Result;

#[derive(Debug, Clone)]
pub struct ZeroField {
    dim: usize,
}

impl ZeroField {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl VelocityField for ZeroField {
    fn action_dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, a: &[f64], _t: f64, _c: &Conditioning) -> Result<Vec<f64>> {
        check_dim("zero field state", self.dim, a.len())?;
        Ok(vec![0.0; self.dim])
    }

    fn velocity_vjp(&self, a: &[f64], _t: f64, _c: &Conditioning, _g: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; a.len()])
    }
}

#[derive(Debug, Clone)]
pub struct ConstantField {
    value: Vec<f64>,
}

impl ConstantField {
    pub fn new(value: Vec<f64>) -> Self {
        Self { value }
    }
}

impl VelocityField for ConstantField {
    fn action_dim(&self) -> usize {
        self.value.len()
    }

    fn velocity(&self, a: &[f64], _t: f64, _c: &Conditioning) -> Result<Vec<f64>> {
        check_dim("constant field state", self.value.len(), a.len())?;
        Ok(self.value.clone())
    }

    fn velocity_vjp(&self, a: &[f64], _t: f64, _c: &Conditioning, _g: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; a.len()])
    }
}

/// Score of an isotropic Gaussian `N(mean, variance·I)`: `v = (mean - a) / variance`.
/// Its energy is `‖a - mean‖² / (2 variance)`.
#[derive(Debug, Clone)]
pub struct GaussianScoreField {
    pub mean: Vec<f64>,
    pub variance: f64,
}

impl GaussianScoreField {
    pub fn new(mean: Vec<f64>, variance: f64) -> Self {
        assert!(variance > 0.0, "variance must be positive");
        Self { mean, variance }
    }
}

impl VelocityField for GaussianScoreField {
    fn action_dim(&self) -> usize {
        self.mean.len()
    }

    fn velocity(&self, a: &[f64], _t: f64, _c: &Conditioning) -> Result<Vec<f64>> {
        check_dim("gaussian field state", self.mean.len(), a.len())?;
        Ok(self
            .mean
            .iter()
            .zip(a)
            .map(|(m, x)| (m - x) / self.variance)
            .collect())
    }

    fn velocity_vjp(&self, _a: &[f64], _t: f64, _c: &Conditioning, g: &[f64]) -> Result<Vec<f64>> {
        Ok(g.iter().map(|gi| -gi / self.variance).collect())
    }
}

/// The exact flow-matching optimum for a point-mass target:
/// `v(a, t) = (target - a) / (1 - t)`, which equals `X_1 - X_0` on every
/// straight interpolation path. At `t = 1` it returns `target - a`.
#[derive(Debug, Clone)]
pub struct PointTargetField {
    pub target: Vec<f64>,
}

impl PointTargetField {
    pub fn new(target: Vec<f64>) -> Self {
        Self { target }
    }

    fn horizon(t: f64) -> f64 {
        if t < 1.0 {
            1.0 - t
        } else {
            1.0
        }
    }
}

impl VelocityField for PointTargetField {
    fn action_dim(&self) -> usize {
        self.target.len()
    }

    fn velocity(&self, a: &[f64], t: f64, _c: &Conditioning) -> Result<Vec<f64>> {
        check_dim("point-target field state", self.target.len(), a.len())?;
        let h = Self::horizon(t);
        Ok(self.target.iter().zip(a).map(|(x1, x)| (x1 - x) / h).collect())
    }

    fn velocity_vjp(&self, _a: &[f64], t: f64, _c: &Conditioning, g: &[f64]) -> Result<Vec<f64>> {
        let h = Self::horizon(t);
        Ok(g.iter().map(|gi| -gi / h).collect())
    }
}

/// Wraps a field so that it returns zero under the null conditioning.
#[derive(Debug, Clone)]
pub struct ConditionalOnly<F> {
    inner: F,
}

impl<F> ConditionalOnly<F> {
    pub fn new(inner: F) -> Self {
        Self { inner }
    }
}

impl<F: VelocityField> VelocityField for ConditionalOnly<F> {
    fn action_dim(&self) -> usize {
        self.inner.action_dim()
    }

    fn velocity(&self, a: &[f64], t: f64, c: &Conditioning) -> Result<Vec<f64>> {
        if c.is_null {
            check_dim("conditional-only state", self.action_dim(), a.len())?;
            Ok(vec![0.0; a.len()])
        } else {
            self.inner.velocity(a, t, c)
        }
    }

    fn velocity_vjp(&self, a: &[f64], t: f64, c: &Conditioning, g: &[f64]) -> Result<Vec<f64>> {
        if c.is_null {
            Ok(vec![0.0; a.len()])
        } else {
            self.inner.velocity_vjp(a, t, c, g)
        }
    }
}
