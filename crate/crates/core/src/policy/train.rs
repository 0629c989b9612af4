use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Conditioning, Normalizer, PolicyCheckpoint, VelocityField};
use crate::error::check_dim;
use crate::numerics::{
    adam_step, backward_batch, forward_batch, norm_sq, Activation, AdamState, MlpParams, MlpSpec,
    SeededRng,
};
use crate::{Error, Result};

pub const DEFAULT_P_UNCOND: f64 = 0.1;

/// One demonstration: conditioning and the physical-unit action to imitate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub cond: Conditioning,
    pub action: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    /// Cosine-anneal the learning rate to zero over the run.
    pub cosine_decay: bool,
    pub epochs: usize,
    /// Rows per optimizer step; `None` means one full-dataset step per epoch.
    pub batch_size: Option<usize>,
    /// Independent `(t, X_0)` draws per demonstration in each epoch.
    pub draws_per_demo: usize,
    /// Standardize the conditioning features (all but the null flag) with
    /// a normalizer stored in the checkpoint.
    pub normalize_conditioning: bool,
    pub p_uncond: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            hidden_dims: vec![128, 128],
            activation: Activation::Tanh,
            lr: 1e-3,
            cosine_decay: false,
            epochs: 2000,
            batch_size: None,
            draws_per_demo: 1,
            normalize_conditioning: false,
            p_uncond: DEFAULT_P_UNCOND,
            seed: 0,
        }
    }
}

impl TrainHyper {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::InvalidArgument(format!("p_uncond {} outside [0, 1]", self.p_uncond)));
        }
        if self.draws_per_demo == 0 || self.batch_size == Some(0) {
            return Err(Error::InvalidArgument("draws_per_demo and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-row loss of each epoch, in normalized action units.
    pub loss_curve: Vec<f64>,
    pub null_fraction_per_epoch: Vec<f64>,
}

/// One regression sample of the flow-matching objective.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMatchingSample {
    pub cond: Conditioning,
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
}

/// Mean over samples of `‖v(X_t, t, c) - (X_1 - X_0)‖²`, `X_t = (1-t) X_0 + t X_1`.
pub fn flow_matching_loss(field: &dyn VelocityField, samples: &[FlowMatchingSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("flow matching loss over no samples".into()));
    }
    let mut total = 0.0;
    for s in samples {
        check_dim("flow matching x1", s.x0.len(), s.x1.len())?;
        let xt: Vec<f64> = s.x0.iter().zip(&s.x1).map(|(a, b)| (1.0 - s.t) * a + s.t * b).collect();
        let v = super::velocity(field, &xt, s.t, &s.cond)?;
        let resid: Vec<f64> = v
            .iter()
            .zip(s.x0.iter().zip(&s.x1))
            .map(|(vi, (a, b))| vi - (b - a))
            .collect();
        total += norm_sq(&resid);
    }
    Ok(total / samples.len() as f64)
}

/// Trains a conditional velocity field on normalized actions with condition
/// dropout. Each epoch nulls exactly `round(p_uncond · rows)` rows.
pub fn train_unimanual(
    demos: &[TrainingPair],
    hyper: &TrainHyper,
) -> Result<(PolicyCheckpoint, TrainReport)> {
    hyper.validate()?;
    let first = demos
        .first()
        .ok_or_else(|| Error::InvalidArgument("no demonstrations to train on".into()))?;
    let action_dim = first.action.len();
    let cond_dim = first.cond.dim();
    for d in demos {
        check_dim("demo action", action_dim, d.action.len())?;
        check_dim("demo conditioning", cond_dim, d.cond.dim())?;
        if d.action.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("demo action"));
        }
    }

    let normalizer = Normalizer::fit(demos.iter().map(|d| d.action.as_slice()))?;
    let targets: Vec<Vec<f64>> = demos.iter().map(|d| normalizer.normalize(&d.action)).collect();
    let raw: Vec<Vec<f64>> = demos.iter().map(|d| d.cond.features()).collect();
    let cond_normalizer = if hyper.normalize_conditioning {
        Normalizer::fit(raw.iter().map(|f| &f[..cond_dim - 1]))?
    } else {
        Normalizer::identity(cond_dim - 1)
    };
    let features: Vec<Vec<f64>> = raw
        .iter()
        .map(|f| {
            let mut z = cond_normalizer.normalize(&f[..cond_dim - 1]);
            z.push(f[cond_dim - 1]);
            z
        })
        .collect();
    let null_features = first.cond.null_like().features();

    let input_dim = action_dim + 1 + cond_dim;
    let spec = MlpSpec::new(input_dim, hyper.hidden_dims.clone(), action_dim, hyper.activation)?;
    let mut rng = SeededRng::new(hyper.seed);
    let mut params = MlpParams::init(&spec, rng.next_u64());
    let mut adam = AdamState::new(&params);

    let rows = demos.len() * hyper.draws_per_demo;
    let n_null = (hyper.p_uncond * rows as f64).round() as usize;
    let batch = hyper.batch_size.unwrap_or(rows).min(rows);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..rows).collect();

    for epoch in 0..hyper.epochs {
        rng.shuffle(&mut order);
        // The first n_null positions of the shuffled order are dropped out.
        let mut is_null = vec![false; rows];
        order[..n_null].iter().for_each(|&r| is_null[r] = true);
        rng.shuffle(&mut order);

        let mut inputs = Array2::<f64>::zeros((rows, input_dim));
        let mut velocity_targets = Array2::<f64>::zeros((rows, action_dim));
        for r in 0..rows {
            let d = r % demos.len();
            let x1 = &targets[d];
            let x0 = rng.normal_vec(action_dim);
            let t = rng.uniform();
            let mut row = inputs.row_mut(r);
            for k in 0..action_dim {
                row[k] = (1.0 - t) * x0[k] + t * x1[k];
                velocity_targets[[r, k]] = x1[k] - x0[k];
            }
            row[action_dim] = t;
            let feats = if is_null[r] { &null_features } else { &features[d] };
            for (k, f) in feats.iter().enumerate() {
                row[action_dim + 1 + k] = *f;
            }
        }

        let lr = if hyper.cosine_decay {
            let progress = epoch as f64 / hyper.epochs as f64;
            0.5 * hyper.lr * (1.0 + (std::f64::consts::PI * progress).cos())
        } else {
            hyper.lr
        };
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let x = inputs.select(ndarray::Axis(0), chunk);
            let y = velocity_targets.select(ndarray::Axis(0), chunk);
            let (out, cache) = forward_batch(&params, x.view())?;
            let resid = &out - &y;
            epoch_loss += resid.iter().map(|e| e * e).sum::<f64>();
            let grad_out = resid * (2.0 / chunk.len() as f64);
            let (grads, _) = backward_batch(&params, &cache, grad_out.view())?;
            if !grads.is_finite() {
                return Err(Error::Diverged { epoch, loss: f64::NAN });
            }
            adam_step(&mut params, &grads, &mut adam, lr)?;
        }
        let loss = epoch_loss / rows as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        report.loss_curve.push(loss);
        report.null_fraction_per_epoch.push(n_null as f64 / rows as f64);
    }

    let mut ckpt = PolicyCheckpoint::new(params, action_dim, cond_dim, normalizer)?.with_cond_normalizer(cond_normalizer)?;
    ckpt.training_seed = hyper.seed;
    ckpt.epochs = hyper.epochs;
    ckpt.final_loss = report.loss_curve.last().copied().unwrap_or(f64::NAN);
    Ok((ckpt, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::analytic::PointTargetField;

    fn cond() -> Conditioning {
        Conditioning::new(vec![0.2], vec![], vec![1.0])
    }

    #[test]
    fn oracle_field_has_zero_loss() {
        let x1 = vec![0.7, -1.2];
        let field = PointTargetField::new(x1.clone());
        let mut rng = SeededRng::new(5);
        let samples: Vec<FlowMatchingSample> = (0..50)
            .map(|_| FlowMatchingSample {
                cond: cond(),
                x0: rng.normal_vec(2),
                x1: x1.clone(),
                t: rng.uniform() * 0.99,
            })
            .collect();
        assert!(flow_matching_loss(&field, &samples).unwrap() < 1e-24);
    }

    #[test]
    fn empty_demos_rejected() {
        assert!(train_unimanual(&[], &TrainHyper::default()).is_err());
    }

    #[test]
    fn dropout_fraction_is_exact_per_epoch() {
        let demos: Vec<TrainingPair> = (0..40)
            .map(|i| TrainingPair { cond: cond(), action: vec![i as f64 * 0.1] })
            .collect();
        let hyper = TrainHyper {
            hidden_dims: vec![8],
            epochs: 5,
            seed: 3,
            ..TrainHyper::default()
        };
        let (_, report) = train_unimanual(&demos, &hyper).unwrap();
        for f in report.null_fraction_per_epoch {
            assert!((f - 0.1).abs() <= 0.02);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let demos = vec![TrainingPair { cond: cond(), action: vec![0.5, 1.5] }];
        let hyper = TrainHyper { hidden_dims: vec![8], epochs: 20, seed: 11, ..TrainHyper::default() };
        let (a, ra) = train_unimanual(&demos, &hyper).unwrap();
        let (b, rb) = train_unimanual(&demos, &hyper).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }
}
