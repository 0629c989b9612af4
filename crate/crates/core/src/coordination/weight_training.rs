//! Imitation training of the weight predictor through a fixed-step denoising
//! unroll with frozen policies.
//!
//! The loss is the mean squared distance (normalized coordinates) between
//! the unrolled sample and the demonstrated action. Gradients flow back
//! through every Euler step: the generative field contributes its exact
//! vector-Jacobian product, the coordination gradient its Hessian-vector
//! product (central differences at fixed weights). The dependence of the
//! weights on the state is not differentiated, matching the sampler, which
//! also treats weights as constants within a step.

use serde::{Deserialize, Serialize};

use super::{weighted_sum, Coordinator, PoseHistory, WeightNet, NUM_TERMS};
use crate::composition::{ArmPair, BimanualAction, BimanualField};
use crate::numerics::{adam_step, derive_seed, AdamState, MlpParams, SeededRng};
use crate::policy::Conditioning;
use crate::{Error, Result};

/// One control step of a bimanual demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDemo {
    pub conds: ArmPair<Conditioning>,
    pub history: PoseHistory,
    pub target: BimanualAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightTrainHyper {
    pub epochs: usize,
    pub lr: f64,
    /// Euler steps in the unroll.
    pub steps: usize,
    /// Fixed noise draws per demonstration step.
    pub draws_per_demo: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for WeightTrainHyper {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-2,
            steps: 5,
            draws_per_demo: 2,
            hidden: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightTrainReport {
    /// Loss of the parameters entering each epoch; the last entry is the
    /// loss after the final update.
    pub loss_curve: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_epoch: usize,
    /// No demonstrations were given; the uniform initialization is returned.
    pub fallback_uniform: bool,
}

struct StepRecord {
    state: ArmPair<Vec<f64>>,
    t: f64,
    gradients: [ArmPair<Vec<f64>>; NUM_TERMS],
    weights: [f64; NUM_TERMS],
    weight_input: Vec<f64>,
}

fn add_scaled(a: &mut ArmPair<Vec<f64>>, s: f64, b: &ArmPair<Vec<f64>>) {
    a.left.iter_mut().zip(&b.left).for_each(|(x, y)| *x += s * y);
    a.right.iter_mut().zip(&b.right).for_each(|(x, y)| *x += s * y);
}

fn pair_dot(a: &ArmPair<Vec<f64>>, b: &ArmPair<Vec<f64>>) -> f64 {
    a.left.iter().zip(&b.left).chain(a.right.iter().zip(&b.right)).map(|(x, y)| x * y).sum()
}

/// Loss of one unrolled sample and, if `grads` is given, accumulation of its
/// parameter gradient.
fn unroll(
    field: &dyn BimanualField,
    coord: &Coordinator,
    demo: &WeightDemo,
    target: &ArmPair<Vec<f64>>,
    noise: &ArmPair<Vec<f64>>,
    steps: usize,
    grads: Option<&mut MlpParams>,
) -> Result<f64> {
    let dt = 1.0 / steps as f64;
    let mut z = noise.clone();
    let mut records = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = k as f64 * dt;
        let v = field.velocity(&z, t, &demo.conds)?;
        let an = coord.analyze(&z, &demo.history)?;
        let g = an.weighted_gradient();
        let mut next = z.clone();
        add_scaled(&mut next, dt, &v);
        add_scaled(&mut next, -dt, &g);
        records.push(StepRecord {
            state: z,
            t,
            gradients: an.gradients,
            weights: an.weights,
            weight_input: an.weight_input,
        });
        z = next;
    }
    let dim = (z.left.len() + z.right.len()) as f64;
    let mut resid = z.clone();
    add_scaled(&mut resid, -1.0, target);
    let loss = pair_dot(&resid, &resid) / dim;
    if !loss.is_finite() {
        return Err(Error::NonFinite("weight training unroll"));
    }
    let Some(grads) = grads else {
        return Ok(loss);
    };

    let mut lambda = resid.map(|v| v.into_iter().map(|x| 2.0 * x / dim).collect::<Vec<_>>());
    for rec in records.iter().rev() {
        // Weights: the step adds -dt Σ_j w_j ∇e_j.
        let dl_dw: [f64; NUM_TERMS] = std::array::from_fn(|j| -dt * pair_dot(&lambda, &rec.gradients[j]));
        let mean: f64 = dl_dw.iter().zip(&rec.weights).map(|(g, w)| g * w).sum();
        let dl_dlogit: Vec<f64> = dl_dw.iter().zip(&rec.weights).map(|(g, w)| w * (g - mean)).collect();
        if dl_dlogit.iter().any(|g| *g != 0.0) {
            let pg = coord.weight_net.logits_vjp(&rec.weight_input, &dl_dlogit)?;
            grads.add_scaled(&pg, 1.0);
        }

        // State: λ_k = λ_{k+1} + dt (J_vᵀ λ - H λ).
        let jv = field.velocity_vjp(&rec.state, rec.t, &demo.conds, &lambda)?;
        let hv = coord_hvp(coord, &demo.history, &rec.state, &rec.weights, &lambda)?;
        let mut next = lambda.clone();
        add_scaled(&mut next, dt, &jv);
        add_scaled(&mut next, -dt, &hv);
        lambda = next;
    }
    Ok(loss)
}

/// Hessian of `Σ_j w_j e_j` (weights fixed) applied to `dir`.
fn coord_hvp(
    coord: &Coordinator,
    h: &PoseHistory,
    z: &ArmPair<Vec<f64>>,
    weights: &[f64; NUM_TERMS],
    dir: &ArmPair<Vec<f64>>,
) -> Result<ArmPair<Vec<f64>>> {
    let n = pair_dot(dir, dir).sqrt();
    if n == 0.0 || weights.iter().all(|w| *w == 0.0) {
        return Ok(dir.clone().map(|v| vec![0.0; v.len()]));
    }
    let eps = 1e-5 / n;
    let mut plus = z.clone();
    add_scaled(&mut plus, eps, dir);
    let mut minus = z.clone();
    add_scaled(&mut minus, -eps, dir);
    let gp = weighted_sum(&coord.analyze(&plus, h)?.gradients, weights);
    let gm = weighted_sum(&coord.analyze(&minus, h)?.gradients, weights);
    let mut out = gp;
    add_scaled(&mut out, -1.0, &gm);
    Ok(out.map(|v| v.into_iter().map(|x| x / (2.0 * eps)).collect()))
}

/// Trains `coordinator.weight_net` by imitation through the unroll, starting
/// from a uniform (zero final layer) predictor. Returns the best parameters
/// seen, so the final loss never exceeds the initial one.
pub fn train_weight_net(
    demos: &[WeightDemo],
    field: &dyn BimanualField,
    coordinator: &Coordinator,
    hyper: &WeightTrainHyper,
) -> Result<(WeightNet, WeightTrainReport)> {
    if hyper.steps == 0 || hyper.draws_per_demo == 0 {
        return Err(Error::InvalidArgument("weight training needs steps and draws >= 1".into()));
    }
    let dim = coordinator.action_dim();
    let init = WeightNet::uniform(dim, hyper.hidden, derive_seed(hyper.seed, &[0]))?;
    if demos.is_empty() {
        let report = WeightTrainReport { fallback_uniform: true, ..WeightTrainReport::default() };
        return Ok((init, report));
    }

    let mut coord = coordinator.clone();
    coord.weight_net = init;
    let mut rng = SeededRng::new(derive_seed(hyper.seed, &[1]));
    let samples: Vec<(usize, ArmPair<Vec<f64>>)> = (0..demos.len())
        .flat_map(|d| std::iter::repeat_n(d, hyper.draws_per_demo))
        .map(|d| (d, ArmPair::new(rng.normal_vec(dim), rng.normal_vec(dim))))
        .collect();
    let targets: Vec<ArmPair<Vec<f64>>> = demos.iter().map(|d| coord.normalize_action(&d.target)).collect();
    let n = samples.len() as f64;

    let mut adam = AdamState::new(&coord.weight_net.params);
    let mut report = WeightTrainReport::default();
    let mut best = (f64::INFINITY, coord.weight_net.clone(), 0);
    for epoch in 0..=hyper.epochs {
        let mut grads = coord.weight_net.params.zero_like();
        let want_grad = epoch < hyper.epochs;
        let mut loss = 0.0;
        for (d, noise) in &samples {
            let g = want_grad.then_some(&mut grads);
            loss += unroll(field, &coord, &demos[*d], &targets[*d], noise, hyper.steps, g)?;
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        report.loss_curve.push(loss);
        if loss < best.0 {
            best = (loss, coord.weight_net.clone(), epoch);
        }
        if want_grad {
            grads.scale(1.0 / n);
            adam_step(&mut coord.weight_net.params, &grads, &mut adam, hyper.lr)
                .map_err(|_| Error::Diverged { epoch, loss })?;
        }
    }
    report.initial_loss = report.loss_curve[0];
    report.final_loss = best.0;
    report.best_epoch = best.2;
    Ok((best.1, report))
}
