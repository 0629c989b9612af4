use super::MlpParams;
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: MlpParams,
    pub second_moment: MlpParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        Self {
            first_moment: params.zero_like(),
            second_moment: params.zero_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place. Non-finite gradients are rejected
/// before anything is touched.
pub fn adam_step(
    params: &mut MlpParams,
    grads: &MlpParams,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    if grads.spec != params.spec {
        return Err(Error::InvalidArgument("gradient shape does not match parameters".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    let tensors = params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(state.first_moment.tensors_mut())
        .zip(state.second_moment.tensors_mut());
    for (((p, g), m), v) in tensors {
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Activation, MlpSpec};

    fn params() -> MlpParams {
        MlpParams::init(&MlpSpec::new(3, vec![4], 2, Activation::Tanh).unwrap(), 1)
    }

    #[test]
    fn zero_gradient_leaves_params_and_moments() {
        let mut p = params();
        let before = p.clone();
        let mut state = AdamState::new(&p);
        let zero = p.zero_like();
        adam_step(&mut p, &zero, &mut state, 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.first_moment, before.zero_like());
        assert_eq!(state.second_moment, before.zero_like());
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        let mut p = params();
        let before = p.to_flat();
        let mut grads = p.zero_like();
        let n = grads.num_params();
        let flat: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { 0.0 } else { (i as f64 - 7.5) * 0.3 }).collect();
        grads = MlpParams::from_flat(&grads.spec, &flat).unwrap();
        let mut state = AdamState::new(&p);
        let lr = 1e-3;
        adam_step(&mut p, &grads, &mut state, lr).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        for ((after, b), g) in p.to_flat().iter().zip(&before).zip(&flat) {
            let expected = if *g == 0.0 { 0.0 } else { lr * g / (g.abs() + ADAM_EPS) };
            assert!(((b - after) - expected).abs() < 1e-15);
            if *g != 0.0 {
                assert!(((b - after).abs() - lr).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn second_identical_step_matches_closed_form() {
        let mut p = params();
        let g = 0.4;
        let grads = MlpParams::from_flat(&p.spec, &vec![g; p.num_params()]).unwrap();
        let mut state = AdamState::new(&p);
        let lr = 1e-2;
        let p0 = p.to_flat()[0];
        adam_step(&mut p, &grads, &mut state, lr).unwrap();
        let p1 = p.to_flat()[0];
        adam_step(&mut p, &grads, &mut state, lr).unwrap();
        let p2 = p.to_flat()[0];
        // Constant gradient: both bias-corrected moments equal the raw gradient
        // at every step, so both updates are lr * g / (|g| + eps).
        let step = lr * g / (g + ADAM_EPS);
        assert!(((p0 - p1) - step).abs() < 1e-15);
        assert!(((p1 - p2) - step).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected_without_mutation() {
        let mut p = params();
        let before = p.clone();
        let mut flat = vec![0.1; p.num_params()];
        flat[2] = f64::NAN;
        let mut grads = p.zero_like();
        for (dst, src) in grads.tensors_mut().flat_map(|t| t.iter_mut()).zip(&flat) {
            *dst = *src;
        }
        let mut state = AdamState::new(&p);
        assert_eq!(adam_step(&mut p, &grads, &mut state, 1e-3), Err(Error::NonFinite("gradient")));
        assert_eq!(p, before);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn rejects_bad_learning_rate() {
        let mut p = params();
        let g = p.zero_like();
        let mut state = AdamState::new(&p);
        assert!(adam_step(&mut p, &g, &mut state, 0.0).is_err());
    }
}
