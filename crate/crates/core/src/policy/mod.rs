//! Unimanual flow-matching policies and their energy reading.
//!
//! A policy is a conditional velocity field `v(a, t, c)` over normalized
//! action coordinates. Euler integration of `v` from `a ~ N(0, I)` at `t = 0`
//! to `t = 1` produces an action. Read as an energy model, `v = -∇E`; the
//! energy value itself is only defined up to an intractable constant, so
//! thresholds use the proxy `½‖v‖²`, which vanishes exactly where the field
//! is stationary.

pub mod analytic;
mod checkpoint;
mod train;

pub use checkpoint::{Normalizer, PolicyCheckpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use train::{
    flow_matching_loss, train_unimanual, FlowMatchingSample, TrainHyper, TrainReport, TrainingPair,
    DEFAULT_P_UNCOND,
};

use serde::{Deserialize, Serialize};

use crate::error::check_dim;
use crate::numerics::{axpy, norm_sq, SeededRng};
use crate::Result;

/// Per-arm conditioning `(observation, proprioception, instruction)`.
///
/// The null variant stands for "no conditioning": its features are all zeros
/// except a trailing flag channel set to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub observation: Vec<f64>,
    pub proprio: Vec<f64>,
    pub instruction: Vec<f64>,
    pub is_null: bool,
}

impl Conditioning {
    pub fn new(observation: Vec<f64>, proprio: Vec<f64>, instruction: Vec<f64>) -> Self {
        Self {
            observation,
            proprio,
            instruction,
            is_null: false,
        }
    }

    /// The reserved null embedding with the same layout as `self`.
    pub fn null_like(&self) -> Self {
        Self {
            observation: vec![0.0; self.observation.len()],
            proprio: vec![0.0; self.proprio.len()],
            instruction: vec![0.0; self.instruction.len()],
            is_null: true,
        }
    }

    /// Feature width fed to the network, including the null flag.
    pub fn dim(&self) -> usize {
        self.observation.len() + self.proprio.len() + self.instruction.len() + 1
    }

    pub fn write_features(&self, out: &mut Vec<f64>) {
        if self.is_null {
            out.extend(std::iter::repeat_n(0.0, self.dim() - 1));
            out.push(1.0);
        } else {
            out.extend_from_slice(&self.observation);
            out.extend_from_slice(&self.proprio);
            out.extend_from_slice(&self.instruction);
            out.push(0.0);
        }
    }

    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        self.write_features(&mut out);
        out
    }
}

/// A time-dependent velocity field over flow states.
pub trait VelocityField: Send + Sync {
    fn action_dim(&self) -> usize;

    fn velocity(&self, a: &[f64], t: f64, c: &Conditioning) -> Result<Vec<f64>>;

    /// `cotangentᵀ · ∂v/∂a`. The default uses central differences; network
    /// fields override it with exact reverse mode.
    fn velocity_vjp(
        &self,
        a: &[f64],
        t: f64,
        c: &Conditioning,
        cotangent: &[f64],
    ) -> Result<Vec<f64>> {
        check_dim("vjp cotangent", self.action_dim(), cotangent.len())?;
        let h = 1e-6;
        let mut out = vec![0.0; a.len()];
        let mut probe = a.to_vec();
        for k in 0..a.len() {
            probe[k] = a[k] + h;
            let plus = self.velocity(&probe, t, c)?;
            probe[k] = a[k] - h;
            let minus = self.velocity(&probe, t, c)?;
            probe[k] = a[k];
            out[k] = plus
                .iter()
                .zip(&minus)
                .zip(cotangent)
                .map(|((p, m), g)| g * (p - m) / (2.0 * h))
                .sum();
        }
        Ok(out)
    }
}

/// Conditional field evaluation; with a null `c` this is the unconditional field.
pub fn velocity(
    field: &dyn VelocityField,
    a: &[f64],
    t: f64,
    c: &Conditioning,
) -> Result<Vec<f64>> {
    check_time(t)?;
    field.velocity(a, t, c)
}

/// Energy proxy `½‖v(a, t, c)‖²`.
pub fn energy_proxy(field: &dyn VelocityField, a: &[f64], t: f64, c: &Conditioning) -> Result<f64> {
    Ok(0.5 * norm_sq(&velocity(field, a, t, c)?))
}

/// Classifier-free guided field `v_null + w (v_cond - v_null)`.
///
/// At `w = 1` and `w = 0` the pure conditional and unconditional fields are
/// returned without evaluating the other one.
pub fn guided_velocity(
    field: &dyn VelocityField,
    a: &[f64],
    t: f64,
    c: &Conditioning,
    weight: f64,
) -> Result<Vec<f64>> {
    if c.is_null {
        return Err(crate::Error::NullConditioning("guided_velocity"));
    }
    if weight == 1.0 {
        return velocity(field, a, t, c);
    }
    let v_null = velocity(field, a, t, &c.null_like())?;
    if weight == 0.0 {
        return Ok(v_null);
    }
    let v_cond = velocity(field, a, t, c)?;
    Ok(v_null
        .iter()
        .zip(&v_cond)
        .map(|(n, k)| n + weight * (k - n))
        .collect())
}

/// One explicit Euler step of the flow ODE.
pub fn euler_step(
    field: &dyn VelocityField,
    a: &[f64],
    t: f64,
    dt: f64,
    c: &Conditioning,
) -> Result<Vec<f64>> {
    let v = velocity(field, a, t, c)?;
    Ok(axpy(a, dt, &v))
}

/// One Langevin update `a - η∇E + sqrt(2η)·s·ε` with `∇E := -v`.
///
/// With `noise_scale == 0` no noise is drawn and the result is exactly the
/// Euler step of size `η`.
pub fn langevin_step(
    field: &dyn VelocityField,
    a: &[f64],
    t: f64,
    c: &Conditioning,
    eta: f64,
    noise_scale: f64,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    if !(eta > 0.0) {
        return Err(crate::Error::InvalidArgument(format!("langevin step size must be positive, got {eta}")));
    }
    let v = velocity(field, a, t, c)?;
    let mut next: Vec<f64> = a.iter().zip(&v).map(|(x, vi)| x - eta * -vi).collect();
    if noise_scale != 0.0 {
        let amp = (2.0 * eta).sqrt() * noise_scale;
        next.iter_mut()
            .for_each(|x| *x += amp * rng.standard_normal());
    }
    Ok(next)
}

/// Runs `steps` Langevin updates from `initial` at fixed flow time `t`.
#[allow(clippy::too_many_arguments)]
pub fn langevin_chain(
    field: &dyn VelocityField,
    initial: Vec<f64>,
    t: f64,
    c: &Conditioning,
    eta: f64,
    noise_scale: f64,
    steps: usize,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    let mut a = initial;
    for _ in 0..steps {
        a = langevin_step(field, &a, t, c, eta, noise_scale, rng)?;
    }
    Ok(a)
}

/// States visited by Euler integration; `states.len() == steps + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub states: Vec<Vec<f64>>,
    pub action: Vec<f64>,
}

/// Integrates `field` from `initial` over `[0, 1]` with `steps` Euler steps.
pub fn integrate_flow(
    field: &dyn VelocityField,
    initial: Vec<f64>,
    c: &Conditioning,
    steps: usize,
) -> Result<FlowSample> {
    if steps == 0 {
        return Err(crate::Error::InvalidArgument("flow integration needs >= 1 step".into()));
    }
    check_dim("flow initial state", field.action_dim(), initial.len())?;
    let dt = 1.0 / steps as f64;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(initial);
    for k in 0..steps {
        let next = euler_step(field, states.last().expect("non-empty"), k as f64 * dt, dt, c)?;
        if next.iter().any(|x| !x.is_finite()) {
            return Err(crate::Error::SamplerDiverged { step: k + 1 });
        }
        states.push(next);
    }
    let action = states.last().expect("non-empty").clone();
    Ok(FlowSample { states, action })
}

/// Draws `a_0 ~ N(0, I)` from `rng` and integrates.
pub fn sample_flow(
    field: &dyn VelocityField,
    c: &Conditioning,
    steps: usize,
    rng: &mut SeededRng,
) -> Result<FlowSample> {
    let initial = rng.normal_vec(field.action_dim());
    integrate_flow(field, initial, c, steps)
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(crate::Error::InvalidArgument(format!("flow time {t} outside [0, 1]")))
    }
}

#[cfg(test)]
mod tests {
    use super::analytic::{ConstantField, GaussianScoreField, ZeroField};
    use super::*;

    fn cond() -> Conditioning {
        Conditioning::new(vec![0.5, -0.5], vec![1.0], vec![0.0, 1.0])
    }

    #[test]
    fn null_features_are_zeros_plus_flag() {
        let c = cond();
        assert_eq!(c.features(), vec![0.5, -0.5, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(c.null_like().features(), vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(c.dim(), 6);
    }

    #[test]
    fn energy_proxy_is_half_squared_norm() {
        let f = ConstantField::new(vec![3.0, 4.0]);
        assert_eq!(energy_proxy(&f, &[0.0, 0.0], 0.3, &cond()).unwrap(), 12.5);
        assert_eq!(energy_proxy(&ZeroField::new(2), &[1.0, 2.0], 0.3, &cond()).unwrap(), 0.0);
    }

    #[test]
    fn constant_field_integrates_exactly() {
        let f = ConstantField::new(vec![1.0]);
        let s = integrate_flow(&f, vec![0.0], &cond(), 5).unwrap();
        assert_eq!(s.states.len(), 6);
        assert_eq!(s.action, vec![1.0]);
    }

    #[test]
    fn zero_field_returns_noise() {
        let mut rng = SeededRng::new(3);
        let s = sample_flow(&ZeroField::new(3), &cond(), 4, &mut rng).unwrap();
        assert_eq!(s.action, s.states[0]);
    }

    #[test]
    fn langevin_zero_noise_is_euler() {
        let f = GaussianScoreField::new(vec![0.3, -1.0], 0.7);
        let mut rng = SeededRng::new(0);
        let a = [1.25, 0.5];
        let l = langevin_step(&f, &a, 0.4, &cond(), 0.2, 0.0, &mut rng).unwrap();
        let e = euler_step(&f, &a, 0.4, 0.2, &cond()).unwrap();
        assert_eq!(l, e);
    }

    #[test]
    fn langevin_fixed_point_of_zero_field() {
        let mut rng = SeededRng::new(0);
        let a = [0.1, -0.2];
        let out = langevin_step(&ZeroField::new(2), &a, 0.0, &cond(), 0.5, 0.0, &mut rng).unwrap();
        assert_eq!(out, a.to_vec());
    }

    #[test]
    fn langevin_contracts_to_quadratic_minimum() {
        let mu = vec![0.8, -0.4, 2.0];
        let f = GaussianScoreField::new(mu.clone(), 1.0);
        let mut rng = SeededRng::new(0);
        let mut a = vec![0.0; 3];
        for _ in 0..100 {
            a = langevin_step(&f, &a, 0.0, &cond(), 0.1, 0.0, &mut rng).unwrap();
        }
        // error shrinks by (1 - 0.1)^100 ≈ 2.7e-5 of the initial offset
        for (x, m) in a.iter().zip(&mu) {
            assert!((x - m).abs() < 1e-4);
        }
    }

    #[test]
    fn langevin_rejects_non_positive_eta() {
        let mut rng = SeededRng::new(0);
        assert!(langevin_step(&ZeroField::new(1), &[0.0], 0.0, &cond(), 0.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn guided_rejects_null_and_interpolates() {
        let f = ZeroField::new(1);
        assert!(guided_velocity(&f, &[0.0], 0.0, &cond().null_like(), 1.0).is_err());
        let g = analytic::ConditionalOnly::new(ConstantField::new(vec![2.0]));
        assert_eq!(guided_velocity(&g, &[0.0], 0.5, &cond(), 1.0).unwrap(), vec![2.0]);
        assert_eq!(guided_velocity(&g, &[0.0], 0.5, &cond(), 0.0).unwrap(), vec![0.0]);
    }

    #[test]
    fn time_outside_unit_interval_rejected() {
        assert!(velocity(&ZeroField::new(1), &[0.0], 1.5, &cond()).is_err());
    }

    #[test]
    fn default_vjp_matches_linear_field() {
        let f = GaussianScoreField::new(vec![0.0, 0.0], 2.0);
        // v = -a / 2, so cotangentᵀ ∂v/∂a = -cotangent / 2
        let g = f.velocity_vjp(&[0.3, 0.1], 0.0, &cond(), &[1.0, -4.0]).unwrap();
        assert!((g[0] + 0.5).abs() < 1e-8 && (g[1] - 2.0).abs() < 1e-8);
    }
}
