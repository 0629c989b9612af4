use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Conditioning, VelocityField};
use crate::error::check_dim;
use crate::numerics::{mlp_backward, mlp_forward, MlpParams, MlpSpec};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "dualflow-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Coordinates whose spread falls below this are left unscaled.
const MIN_STD: f64 = 1e-6;

/// Per-coordinate affine map between physical and normalized actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fits mean and population standard deviation per coordinate.
    /// Constant coordinates get unit scale.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot fit a normalizer to no data".into()))?;
        let dim = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in &rows {
            check_dim("normalizer row", dim, r.len())?;
            mean.iter_mut().zip(*r).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in &rows {
            var.iter_mut()
                .zip(r.iter().zip(&mean))
                .for_each(|(v, (x, m))| *v += (x - m) * (x - m));
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s < MIN_STD {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| m + s * v)
            .collect()
    }
}

/// A trained velocity network `v(a, t, c)` over normalized actions, with the
/// normalizer that maps its outputs back to physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CheckpointFile", into = "CheckpointFile")]
pub struct PolicyCheckpoint {
    pub params: MlpParams,
    pub action_dim: usize,
    pub cond_dim: usize,
    pub normalizer: Normalizer,
    /// Applied to the non-null conditioning features (flag channel excluded).
    pub cond_normalizer: Normalizer,
    pub training_seed: u64,
    pub epochs: usize,
    pub final_loss: f64,
}

impl PolicyCheckpoint {
    pub fn new(
        params: MlpParams,
        action_dim: usize,
        cond_dim: usize,
        normalizer: Normalizer,
    ) -> Result<Self> {
        let ckpt = Self {
            params,
            action_dim,
            cond_dim,
            normalizer,
            cond_normalizer: Normalizer::identity(cond_dim.saturating_sub(1)),
            training_seed: 0,
            epochs: 0,
            final_loss: 0.0,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// All-zero network: the velocity is identically zero.
    pub fn zeros(action_dim: usize, cond_dim: usize, hidden_dims: Vec<usize>) -> Result<Self> {
        let spec = MlpSpec::new(
            action_dim + cond_dim + 1,
            hidden_dims,
            action_dim,
            crate::numerics::Activation::Tanh,
        )?;
        Self::new(
            MlpParams::zeros(&spec),
            action_dim,
            cond_dim,
            Normalizer::identity(action_dim),
        )
    }

    /// Replaces the conditioning normalizer; its width must be `cond_dim - 1`.
    pub fn with_cond_normalizer(mut self, n: Normalizer) -> Result<Self> {
        self.cond_normalizer = n;
        self.validate()?;
        Ok(self)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.params.spec
    }

    fn validate(&self) -> Result<()> {
        let spec = &self.params.spec;
        check_dim("checkpoint input width", self.action_dim + self.cond_dim + 1, spec.input_dim)?;
        check_dim("checkpoint output width", self.action_dim, spec.output_dim)?;
        check_dim("normalizer width", self.action_dim, self.normalizer.dim())?;
        check_dim("normalizer std width", self.action_dim, self.normalizer.std.len())?;
        check_dim("conditioning normalizer width", self.cond_dim.saturating_sub(1), self.cond_normalizer.dim())?;
        check_dim("conditioning normalizer std width", self.cond_dim.saturating_sub(1), self.cond_normalizer.std.len())?;
        Ok(())
    }

    fn network_input(&self, a: &[f64], t: f64, c: &Conditioning) -> Result<Vec<f64>> {
        check_dim("policy action", self.action_dim, a.len())?;
        check_dim("policy conditioning", self.cond_dim, c.dim())?;
        let mut input = Vec::with_capacity(self.params.spec.input_dim);
        input.extend_from_slice(a);
        input.push(t);
        c.write_features(&mut input);
        if !c.is_null {
            let n = &self.cond_normalizer;
            let feats = &mut input[self.action_dim + 1..self.action_dim + self.cond_dim];
            feats.iter_mut().zip(n.mean.iter().zip(&n.std)).for_each(|(x, (m, s))| *x = (*x - m) / s);
        }
        Ok(input)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = self.to_json().map_err(std::io::Error::other)?;
        std::fs::write(path, text)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(std::io::Error::other)
    }
}

impl VelocityField for PolicyCheckpoint {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn velocity(&self, a: &[f64], t: f64, c: &Conditioning) -> Result<Vec<f64>> {
        let input = self.network_input(a, t, c)?;
        mlp_forward(&self.params, &input)
    }

    fn velocity_vjp(&self, a: &[f64], t: f64, c: &Conditioning, cotangent: &[f64]) -> Result<Vec<f64>> {
        let input = self.network_input(a, t, c)?;
        let (_, input_grad) = mlp_backward(&self.params, &input, cotangent)?;
        Ok(input_grad[..self.action_dim].to_vec())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingMeta {
    seed: u64,
    epochs: usize,
    final_loss: f64,
}

/// On-disk layout. Field order is the serialization order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    action_dim: usize,
    cond_dim: usize,
    normalizer: Normalizer,
    cond_normalizer: Normalizer,
    training: TrainingMeta,
    network: MlpParams,
}

impl From<PolicyCheckpoint> for CheckpointFile {
    fn from(c: PolicyCheckpoint) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            action_dim: c.action_dim,
            cond_dim: c.cond_dim,
            normalizer: c.normalizer,
            cond_normalizer: c.cond_normalizer,
            training: TrainingMeta {
                seed: c.training_seed,
                epochs: c.epochs,
                final_loss: c.final_loss,
            },
            network: c.params,
        }
    }
}

impl TryFrom<CheckpointFile> for PolicyCheckpoint {
    type Error = Error;

    fn try_from(f: CheckpointFile) -> Result<Self> {
        if f.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unexpected checkpoint format {:?}", f.format)));
        }
        if f.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", f.version)));
        }
        let ckpt = Self {
            params: f.network,
            action_dim: f.action_dim,
            cond_dim: f.cond_dim,
            normalizer: f.normalizer,
            cond_normalizer: f.cond_normalizer,
            training_seed: f.training.seed,
            epochs: f.training.epochs,
            final_loss: f.training.final_loss,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}
