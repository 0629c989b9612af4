//! Bimanual composition of two unimanual velocity fields.
//!
//! The bimanual prior is taken to factor across arms, so the unconditional
//! bimanual field is the concatenation of the two per-arm unconditional
//! fields and each arm is guided independently.

use serde::{Deserialize, Serialize};

use crate::error::check_dim;
use crate::kinematics::ArmAction;
use crate::policy::{energy_proxy, guided_velocity, Conditioning, VelocityField};
use crate::{Error, Result};

/// A left/right pair of anything per-arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ArmPair<T> {
    pub left: T,
    pub right: T,
}

impl<T> ArmPair<T> {
    pub fn new(left: T, right: T) -> Self {
        Self { left, right }
    }

    pub fn as_ref(&self) -> ArmPair<&T> {
        ArmPair::new(&self.left, &self.right)
    }

    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> ArmPair<U> {
        ArmPair::new(f(self.left), f(self.right))
    }

    pub fn zip<U>(self, other: ArmPair<U>) -> ArmPair<(T, U)> {
        ArmPair::new((self.left, other.left), (self.right, other.right))
    }

    pub fn try_map<U>(self, mut f: impl FnMut(T) -> Result<U>) -> Result<ArmPair<U>> {
        Ok(ArmPair::new(f(self.left)?, f(self.right)?))
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        [&self.left, &self.right].into_iter()
    }
}

pub type BimanualAction = ArmPair<ArmAction>;

impl BimanualAction {
    pub fn is_finite(&self) -> bool {
        self.left.is_finite() && self.right.is_finite()
    }
}

impl ArmPair<Vec<f64>> {
    /// `[left; right]`.
    pub fn concat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.left.len() + self.right.len());
        out.extend_from_slice(&self.left);
        out.extend_from_slice(&self.right);
        out
    }

    pub fn split(v: &[f64], left_dim: usize) -> Self {
        ArmPair::new(v[..left_dim].to_vec(), v[left_dim..].to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().flatten().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceWeights {
    pub w_l: f64,
    pub w_r: f64,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        Self { w_l: 1.0, w_r: 1.0 }
    }
}

/// A velocity field over paired per-arm states.
pub trait BimanualField: Send + Sync {
    fn action_dims(&self) -> ArmPair<usize>;

    fn velocity(
        &self,
        state: &ArmPair<Vec<f64>>,
        t: f64,
        conds: &ArmPair<Conditioning>,
    ) -> Result<ArmPair<Vec<f64>>>;

    /// The generative part of the energy proxy at `state`.
    fn energy_proxy(&self, state: &ArmPair<Vec<f64>>, t: f64, conds: &ArmPair<Conditioning>) -> Result<f64>;

    /// `cotangentᵀ · ∂v/∂state`.
    fn velocity_vjp(
        &self,
        state: &ArmPair<Vec<f64>>,
        t: f64,
        conds: &ArmPair<Conditioning>,
        cotangent: &ArmPair<Vec<f64>>,
    ) -> Result<ArmPair<Vec<f64>>>;
}

fn guided_vjp(
    field: &dyn VelocityField,
    a: &[f64],
    t: f64,
    c: &Conditioning,
    weight: f64,
    cotangent: &[f64],
) -> Result<Vec<f64>> {
    if weight == 1.0 {
        return field.velocity_vjp(a, t, c, cotangent);
    }
    let null = field.velocity_vjp(a, t, &c.null_like(), cotangent)?;
    if weight == 0.0 {
        return Ok(null);
    }
    let cond = field.velocity_vjp(a, t, c, cotangent)?;
    Ok(null.iter().zip(&cond).map(|(n, k)| n + weight * (k - n)).collect())
}

/// Two unimanual fields composed by per-arm guidance.
#[derive(Clone, Copy)]
pub struct ComposedPolicy<'a> {
    pub left: &'a dyn VelocityField,
    pub right: &'a dyn VelocityField,
    pub guidance: GuidanceWeights,
}

impl<'a> ComposedPolicy<'a> {
    pub fn new(left: &'a dyn VelocityField, right: &'a dyn VelocityField, guidance: GuidanceWeights) -> Self {
        Self { left, right, guidance }
    }
}

impl BimanualField for ComposedPolicy<'_> {
    fn action_dims(&self) -> ArmPair<usize> {
        ArmPair::new(self.left.action_dim(), self.right.action_dim())
    }

    fn velocity(
        &self,
        state: &ArmPair<Vec<f64>>,
        t: f64,
        conds: &ArmPair<Conditioning>,
    ) -> Result<ArmPair<Vec<f64>>> {
        comp_velocity(self.left, self.right, state, t, conds, self.guidance)
    }

    fn energy_proxy(&self, state: &ArmPair<Vec<f64>>, t: f64, conds: &ArmPair<Conditioning>) -> Result<f64> {
        comp_energy_proxy(self.left, self.right, state, t, conds)
    }

    fn velocity_vjp(
        &self,
        state: &ArmPair<Vec<f64>>,
        t: f64,
        conds: &ArmPair<Conditioning>,
        cotangent: &ArmPair<Vec<f64>>,
    ) -> Result<ArmPair<Vec<f64>>> {
        Ok(ArmPair::new(
            guided_vjp(self.left, &state.left, t, &conds.left, self.guidance.w_l, &cotangent.left)?,
            guided_vjp(self.right, &state.right, t, &conds.right, self.guidance.w_r, &cotangent.right)?,
        ))
    }
}

/// Per arm, `v_null + w (v_cond - v_null)`.
pub fn comp_velocity(
    left: &dyn VelocityField,
    right: &dyn VelocityField,
    state: &ArmPair<Vec<f64>>,
    t: f64,
    conds: &ArmPair<Conditioning>,
    w: GuidanceWeights,
) -> Result<ArmPair<Vec<f64>>> {
    if conds.left.is_null || conds.right.is_null {
        return Err(Error::NullConditioning("comp_velocity"));
    }
    Ok(ArmPair::new(
        guided_velocity(left, &state.left, t, &conds.left, w.w_l)?,
        guided_velocity(right, &state.right, t, &conds.right, w.w_r)?,
    ))
}

/// Sum of the two conditional energy proxies.
pub fn comp_energy_proxy(
    left: &dyn VelocityField,
    right: &dyn VelocityField,
    state: &ArmPair<Vec<f64>>,
    t: f64,
    conds: &ArmPair<Conditioning>,
) -> Result<f64> {
    if conds.left.is_null || conds.right.is_null {
        return Err(Error::NullConditioning("comp_energy_proxy"));
    }
    Ok(energy_proxy(left, &state.left, t, &conds.left)? + energy_proxy(right, &state.right, t, &conds.right)?)
}

/// A single field over the joint `[left; right]` action, conditioned on both
/// arms' features. Used for policies trained directly on bimanual data.
#[derive(Clone, Copy)]
pub struct JointPolicy<'a> {
    pub field: &'a dyn VelocityField,
    pub left_dim: usize,
    pub guidance: f64,
}

impl<'a> JointPolicy<'a> {
    pub fn new(field: &'a dyn VelocityField, left_dim: usize) -> Self {
        Self { field, left_dim, guidance: 1.0 }
    }

    /// Joint conditioning: observation and instruction from the left arm,
    /// both arms' proprioception.
    pub fn joint_conditioning(conds: &ArmPair<Conditioning>) -> Conditioning {
        let mut proprio = conds.left.proprio.clone();
        proprio.extend_from_slice(&conds.right.proprio);
        Conditioning::new(conds.left.observation.clone(), proprio, conds.left.instruction.clone())
    }
}

impl BimanualField for JointPolicy<'_> {
    fn action_dims(&self) -> ArmPair<usize> {
        ArmPair::new(self.left_dim, self.field.action_dim() - self.left_dim)
    }

    fn velocity(
        &self,
        state: &ArmPair<Vec<f64>>,
        t: f64,
        conds: &ArmPair<Conditioning>,
    ) -> Result<ArmPair<Vec<f64>>> {
        check_dim("joint policy left state", self.left_dim, state.left.len())?;
        let c = Self::joint_conditioning(conds);
        let v = guided_velocity(self.field, &state.concat(), t, &c, self.guidance)?;
        Ok(ArmPair::split(&v, self.left_dim))
    }

    fn energy_proxy(&self, state: &ArmPair<Vec<f64>>, t: f64, conds: &ArmPair<Conditioning>) -> Result<f64> {
        energy_proxy(self.field, &state.concat(), t, &Self::joint_conditioning(conds))
    }

    fn velocity_vjp(
        &self,
        state: &ArmPair<Vec<f64>>,
        t: f64,
        conds: &ArmPair<Conditioning>,
        cotangent: &ArmPair<Vec<f64>>,
    ) -> Result<ArmPair<Vec<f64>>> {
        let c = Self::joint_conditioning(conds);
        let g = guided_vjp(self.field, &state.concat(), t, &c, self.guidance, &cotangent.concat())?;
        Ok(ArmPair::split(&g, self.left_dim))
    }
}

/// Sum of fields over one shared action space: the velocity of the summed
/// energy, whose Boltzmann density is the product of the components'.
pub struct SummedField<'a> {
    parts: Vec<&'a dyn VelocityField>,
}

impl<'a> SummedField<'a> {
    pub fn new(parts: Vec<&'a dyn VelocityField>) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("summed field needs at least one part".into()))?;
        for p in &parts {
            check_dim("summed field part", first.action_dim(), p.action_dim())?;
        }
        Ok(Self { parts })
    }
}

impl VelocityField for SummedField<'_> {
    fn action_dim(&self) -> usize {
        self.parts[0].action_dim()
    }

    fn velocity(&self, a: &[f64], t: f64, c: &Conditioning) -> Result<Vec<f64>> {
        let mut total = vec![0.0; a.len()];
        for p in &self.parts {
            let v = p.velocity(a, t, c)?;
            total.iter_mut().zip(&v).for_each(|(s, x)| *s += x);
        }
        Ok(total)
    }

    fn velocity_vjp(&self, a: &[f64], t: f64, c: &Conditioning, g: &[f64]) -> Result<Vec<f64>> {
        let mut total = vec![0.0; a.len()];
        for p in &self.parts {
            let v = p.velocity_vjp(a, t, c, g)?;
            total.iter_mut().zip(&v).for_each(|(s, x)| *s += x);
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::analytic::{ConditionalOnly, ConstantField, PointTargetField};

    fn conds() -> ArmPair<Conditioning> {
        ArmPair::new(
            Conditioning::new(vec![0.1], vec![0.2], vec![1.0, 0.0]),
            Conditioning::new(vec![0.1], vec![-0.2], vec![1.0, 0.0]),
        )
    }

    fn state() -> ArmPair<Vec<f64>> {
        ArmPair::new(vec![0.3], vec![-0.7])
    }

    #[test]
    fn unit_guidance_with_zero_null_is_conditional() {
        let l = ConditionalOnly::new(ConstantField::new(vec![2.0]));
        let r = ConditionalOnly::new(ConstantField::new(vec![-3.0]));
        let v = comp_velocity(&l, &r, &state(), 0.5, &conds(), GuidanceWeights::default()).unwrap();
        assert_eq!(v, ArmPair::new(vec![2.0], vec![-3.0]));
        let w0 = GuidanceWeights { w_l: 0.0, w_r: 0.0 };
        let v = comp_velocity(&l, &r, &state(), 0.5, &conds(), w0).unwrap();
        assert_eq!(v, ArmPair::new(vec![0.0], vec![0.0]));
    }

    #[test]
    fn composed_field_is_separable() {
        let l = PointTargetField::new(vec![1.0]);
        let r = PointTargetField::new(vec![-1.0]);
        let c = conds();
        let v = comp_velocity(&l, &r, &state(), 0.25, &c, GuidanceWeights::default()).unwrap();
        let vl = l.velocity(&state().left, 0.25, &c.left).unwrap();
        let vr = r.velocity(&state().right, 0.25, &c.right).unwrap();
        assert!((v.left[0] - vl[0]).abs() < 1e-12);
        assert!((v.right[0] - vr[0]).abs() < 1e-12);
    }

    #[test]
    fn null_conditioning_rejected() {
        let l = ConstantField::new(vec![1.0]);
        let mut c = conds();
        c.right = c.right.null_like();
        assert!(matches!(
            comp_velocity(&l, &l, &state(), 0.0, &c, GuidanceWeights::default()),
            Err(Error::NullConditioning(_))
        ));
    }

    #[test]
    fn energy_proxies_add() {
        // ½·2² = 2 and ½·(√6)² = 3
        let l = ConstantField::new(vec![2.0]);
        let r = ConstantField::new(vec![6f64.sqrt()]);
        let e = comp_energy_proxy(&l, &r, &state(), 0.1, &conds()).unwrap();
        assert!((e - 5.0).abs() < 1e-12);
    }

    #[test]
    fn guidance_is_affine() {
        let l = PointTargetField::new(vec![1.0]);
        let r = ConditionalOnly::new(ConstantField::new(vec![4.0]));
        let at = |w: f64| {
            comp_velocity(&l, &r, &state(), 0.3, &conds(), GuidanceWeights { w_l: w, w_r: w }).unwrap()
        };
        let (v0, vh, v1) = (at(0.0), at(0.5), at(1.0));
        assert!((vh.right[0] - 0.5 * (v0.right[0] + v1.right[0])).abs() < 1e-12);
        assert!((vh.left[0] - 0.5 * (v0.left[0] + v1.left[0])).abs() < 1e-12);
    }

    #[test]
    fn joint_policy_splits_output() {
        let f = ConstantField::new(vec![1.0, 2.0, 3.0]);
        let j = JointPolicy::new(&f, 1);
        let s = ArmPair::new(vec![0.0], vec![0.0, 0.0]);
        let v = j.velocity(&s, 0.0, &conds()).unwrap();
        assert_eq!(v, ArmPair::new(vec![1.0], vec![2.0, 3.0]));
        assert_eq!(JointPolicy::joint_conditioning(&conds()).proprio, vec![0.2, -0.2]);
    }
}
