//! Temporal and spatial coordination energies over a bimanual action, their
//! analytic gradients, and the softmax weight predictor that mixes them.
//!
//! Temporal terms (velocity, acceleration, jerk, synchronization) act on
//! normalized action coordinates. The two spatial hinge terms act on physical
//! positions and joint angles, since their thresholds are physical.

mod terms;
mod weight_training;

pub use terms::{
    e_accel, e_ee, e_jerk, e_joint, e_sync, e_vel, ee_term, joint_term, sync_term, temporal_term,
    JointTerm,
};
pub use weight_training::{train_weight_net, WeightDemo, WeightTrainHyper, WeightTrainReport};

use serde::{Deserialize, Serialize};

use crate::composition::{ArmPair, BimanualAction, BimanualField};
use crate::error::check_dim;
use crate::kinematics::{ArmGeometry, JointConfig};
use crate::numerics::{mlp_backward, mlp_forward, softmax, Activation, MlpParams, MlpSpec};
use crate::policy::{Conditioning, Normalizer};
use crate::{Error, Result};

pub const D_SAFE: f64 = 0.001;
pub const D_SAFE_JOINT: f64 = 0.001;
pub const NUM_TERMS: usize = 6;
pub const HISTORY_DEPTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Vel,
    Accel,
    Jerk,
    Sync,
    Ee,
    Joint,
}

impl Term {
    pub const ALL: [Term; NUM_TERMS] = [Term::Vel, Term::Accel, Term::Jerk, Term::Sync, Term::Ee, Term::Joint];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Term::Vel => "e_vel",
            Term::Accel => "e_accel",
            Term::Jerk => "e_jerk",
            Term::Sync => "e_sync",
            Term::Ee => "e_ee",
            Term::Joint => "e_joint",
        }
    }

    pub fn is_temporal(self) -> bool {
        matches!(self, Term::Vel | Term::Accel | Term::Jerk | Term::Sync)
    }
}

/// Which of the six terms take part in the weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TermMask(pub [bool; NUM_TERMS]);

impl TermMask {
    pub fn all() -> Self {
        Self([true; NUM_TERMS])
    }

    pub fn none() -> Self {
        Self([false; NUM_TERMS])
    }

    pub fn with_temporal(mut self, on: bool) -> Self {
        Term::ALL.iter().filter(|t| t.is_temporal()).for_each(|t| self.0[t.index()] = on);
        self
    }

    pub fn with_spatial(mut self, on: bool) -> Self {
        Term::ALL.iter().filter(|t| !t.is_temporal()).for_each(|t| self.0[t.index()] = on);
        self
    }

    pub fn enabled(&self, term: Term) -> bool {
        self.0[term.index()]
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|on| !on)
    }
}

impl Default for TermMask {
    fn default() -> Self {
        Self::all()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoordConfig {
    pub d_safe: f64,
    pub d_safe_joint: f64,
    /// Restrict the temporal terms to the three position coordinates.
    pub position_only: bool,
    pub mask: TermMask,
}

impl Default for CoordConfig {
    fn default() -> Self {
        Self {
            d_safe: D_SAFE,
            d_safe_joint: D_SAFE_JOINT,
            position_only: false,
            mask: TermMask::all(),
        }
    }
}

/// The last three executed actions, newest first, and the last joint
/// configuration of each arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseHistory {
    actions: [BimanualAction; HISTORY_DEPTH],
    joints: ArmPair<JointConfig>,
}

impl PoseHistory {
    /// Every slot holds `initial`, so the first step has zero temporal energy.
    pub fn new(initial: BimanualAction, joints: ArmPair<JointConfig>) -> Self {
        Self { actions: [initial; HISTORY_DEPTH], joints }
    }

    /// From up to three actions, newest first; missing slots repeat the oldest.
    pub fn from_recent(recent: &[BimanualAction], joints: ArmPair<JointConfig>) -> Result<Self> {
        let oldest = *recent
            .iter()
            .take(HISTORY_DEPTH)
            .last()
            .ok_or_else(|| Error::InvalidArgument("pose history needs at least one action".into()))?;
        let mut actions = [oldest; HISTORY_DEPTH];
        for (slot, a) in actions.iter_mut().zip(recent) {
            *slot = *a;
        }
        if actions.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("pose history"));
        }
        Ok(Self { actions, joints })
    }

    pub fn push(&mut self, action: BimanualAction, joints: ArmPair<JointConfig>) {
        self.actions.rotate_right(1);
        self.actions[0] = action;
        self.joints = joints;
    }

    /// `a_{t-k}` for `k` in `1..=3`.
    pub fn previous(&self, k: usize) -> &BimanualAction {
        &self.actions[k - 1]
    }

    pub fn joints(&self) -> &ArmPair<JointConfig> {
        &self.joints
    }

    pub fn actions(&self) -> &[BimanualAction; HISTORY_DEPTH] {
        &self.actions
    }
}

/// The six coordination energies, their weights, and the totals.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub e_vel: f64,
    pub e_accel: f64,
    pub e_jerk: f64,
    pub e_sync: f64,
    pub e_ee: f64,
    pub e_joint: f64,
    pub weights: [f64; NUM_TERMS],
    pub e_coord: f64,
    pub e_comp: f64,
    pub e_total: f64,
    /// An IK target had to be projected onto the workspace, or sat on a
    /// singular configuration; the joint term's gradient was dropped.
    pub ik_flagged: bool,
}

impl EnergyBreakdown {
    pub fn terms(&self) -> [f64; NUM_TERMS] {
        [self.e_vel, self.e_accel, self.e_jerk, self.e_sync, self.e_ee, self.e_joint]
    }

    fn from_terms(values: [f64; NUM_TERMS], weights: [f64; NUM_TERMS], e_comp: f64, ik_flagged: bool) -> Self {
        let e_coord = values.iter().zip(&weights).map(|(e, w)| e * w).sum::<f64>();
        Self {
            e_vel: values[0],
            e_accel: values[1],
            e_jerk: values[2],
            e_sync: values[3],
            e_ee: values[4],
            e_joint: values[5],
            weights,
            e_coord,
            e_comp,
            e_total: e_comp + e_coord,
            ik_flagged,
        }
    }

    /// Same terms and weights with the generative part set to `e_comp`.
    pub fn with_comp(self, e_comp: f64) -> Self {
        Self::from_terms(self.terms(), self.weights, e_comp, self.ik_flagged)
    }
}

pub const WEIGHT_NET_FORMAT: &str = "dualflow-weight-net";
pub const WEIGHT_NET_VERSION: u32 = 1;

/// Softmax weight predictor over `[a^L; a^R; v^L; v^R]` in normalized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WeightNetFile", into = "WeightNetFile")]
pub struct WeightNet {
    pub params: MlpParams,
    pub action_dim: usize,
}

impl WeightNet {
    /// One relu hidden layer with a zero final layer: uniform weights.
    pub fn uniform(action_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        let spec = MlpSpec::new(4 * action_dim, vec![hidden], NUM_TERMS, Activation::Relu)?;
        let mut params = MlpParams::init(&spec, seed);
        params.zero_final_layer();
        Ok(Self { params, action_dim })
    }

    pub fn from_params(params: MlpParams, action_dim: usize) -> Result<Self> {
        check_dim("weight net input", 4 * action_dim, params.spec.input_dim)?;
        check_dim("weight net output", NUM_TERMS, params.spec.output_dim)?;
        Ok(Self { params, action_dim })
    }

    /// Network input: both current actions, then both first differences.
    pub fn input(&self, state: &ArmPair<Vec<f64>>, previous: &ArmPair<Vec<f64>>) -> Result<Vec<f64>> {
        check_dim("weight net left action", self.action_dim, state.left.len())?;
        check_dim("weight net right action", self.action_dim, state.right.len())?;
        let mut x = Vec::with_capacity(4 * self.action_dim);
        x.extend_from_slice(&state.left);
        x.extend_from_slice(&state.right);
        for (a, p) in [(&state.left, &previous.left), (&state.right, &previous.right)] {
            x.extend(a.iter().zip(p.iter()).map(|(ai, pi)| ai - pi));
        }
        Ok(x)
    }

    pub fn logits(&self, input: &[f64]) -> Result<Vec<f64>> {
        mlp_forward(&self.params, input)
    }

    /// Parameter gradient of `⟨g, logits⟩`.
    pub fn logits_vjp(&self, input: &[f64], g: &[f64]) -> Result<MlpParams> {
        Ok(mlp_backward(&self.params, input, g)?.0)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightNetFile {
    format: String,
    version: u32,
    input_layout: String,
    action_dim: usize,
    network: MlpParams,
}

impl From<WeightNet> for WeightNetFile {
    fn from(w: WeightNet) -> Self {
        Self {
            format: WEIGHT_NET_FORMAT.into(),
            version: WEIGHT_NET_VERSION,
            input_layout: "left_action,right_action,left_velocity,right_velocity".into(),
            action_dim: w.action_dim,
            network: w.params,
        }
    }
}

impl TryFrom<WeightNetFile> for WeightNet {
    type Error = Error;

    fn try_from(f: WeightNetFile) -> Result<Self> {
        if f.format != WEIGHT_NET_FORMAT || f.version != WEIGHT_NET_VERSION {
            return Err(Error::Format(format!("unsupported weight net file {} v{}", f.format, f.version)));
        }
        WeightNet::from_params(f.network, f.action_dim)
    }
}

/// Softmax over the enabled logits; disabled terms get weight 0.
pub fn masked_softmax(logits: &[f64], mask: &TermMask) -> [f64; NUM_TERMS] {
    let on: Vec<usize> = (0..NUM_TERMS).filter(|&k| mask.0[k]).collect();
    let mut out = [0.0; NUM_TERMS];
    if on.is_empty() {
        return out;
    }
    let sub: Vec<f64> = on.iter().map(|&k| logits[k]).collect();
    for (k, w) in on.iter().zip(softmax(&sub)) {
        out[*k] = w;
    }
    out
}

/// Evaluated coordination state: term values, per-term gradients with respect
/// to the normalized action, and the weights.
#[derive(Debug, Clone)]
pub struct CoordAnalysis {
    pub values: [f64; NUM_TERMS],
    pub gradients: [ArmPair<Vec<f64>>; NUM_TERMS],
    pub weights: [f64; NUM_TERMS],
    pub weight_input: Vec<f64>,
    pub ik_flagged: bool,
    pub joints: ArmPair<JointConfig>,
}

impl CoordAnalysis {
    pub fn breakdown(&self) -> EnergyBreakdown {
        EnergyBreakdown::from_terms(self.values, self.weights, 0.0, self.ik_flagged)
    }

    /// `Σ_k w_k ∇e_k`.
    pub fn weighted_gradient(&self) -> ArmPair<Vec<f64>> {
        weighted_sum(&self.gradients, &self.weights)
    }
}

pub(crate) fn weighted_sum(grads: &[ArmPair<Vec<f64>>; NUM_TERMS], weights: &[f64; NUM_TERMS]) -> ArmPair<Vec<f64>> {
    let mut out = ArmPair::new(vec![0.0; grads[0].left.len()], vec![0.0; grads[0].right.len()]);
    for (g, w) in grads.iter().zip(weights) {
        if *w == 0.0 {
            continue;
        }
        out.left.iter_mut().zip(&g.left).for_each(|(o, x)| *o += w * x);
        out.right.iter_mut().zip(&g.right).for_each(|(o, x)| *o += w * x);
    }
    out
}

/// Everything needed to evaluate the coordination energy of a normalized
/// bimanual state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coordinator {
    pub geoms: ArmPair<ArmGeometry>,
    pub normalizers: ArmPair<Normalizer>,
    pub config: CoordConfig,
    pub weight_net: WeightNet,
}

impl Coordinator {
    pub fn new(
        geoms: ArmPair<ArmGeometry>,
        normalizers: ArmPair<Normalizer>,
        config: CoordConfig,
        weight_net: WeightNet,
    ) -> Result<Self> {
        check_dim("right normalizer", normalizers.left.dim(), normalizers.right.dim())?;
        check_dim("weight net action", normalizers.left.dim(), weight_net.action_dim)?;
        if normalizers.left.dim() < 3 {
            return Err(Error::InvalidArgument("coordination needs actions with a 3D position".into()));
        }
        Ok(Self { geoms, normalizers, config, weight_net })
    }

    pub fn action_dim(&self) -> usize {
        self.weight_net.action_dim
    }

    pub fn normalize_history(&self, h: &PoseHistory) -> [ArmPair<Vec<f64>>; HISTORY_DEPTH] {
        std::array::from_fn(|k| self.normalize_action(&h.actions[k]))
    }

    pub fn normalize_action(&self, a: &BimanualAction) -> ArmPair<Vec<f64>> {
        ArmPair::new(
            self.normalizers.left.normalize(&a.left.to_array()),
            self.normalizers.right.normalize(&a.right.to_array()),
        )
    }

    pub fn denormalize(&self, z: &ArmPair<Vec<f64>>) -> ArmPair<Vec<f64>> {
        ArmPair::new(self.normalizers.left.denormalize(&z.left), self.normalizers.right.denormalize(&z.right))
    }

    /// Term values and gradients at normalized state `z`.
    pub fn analyze(&self, z: &ArmPair<Vec<f64>>, h: &PoseHistory) -> Result<CoordAnalysis> {
        let dim = self.action_dim();
        check_dim("coordination left state", dim, z.left.len())?;
        check_dim("coordination right state", dim, z.right.len())?;
        let past = self.normalize_history(h);
        let mask = self.config.mask;

        let span = if self.config.position_only { 3 } else { dim };
        let cut = |p: &ArmPair<Vec<f64>>| ArmPair::new(p.left[..span].to_vec(), p.right[..span].to_vec());
        let zc = cut(z);
        let pc: [ArmPair<Vec<f64>>; HISTORY_DEPTH] = std::array::from_fn(|k| cut(&past[k]));
        let widen = |g: ArmPair<Vec<f64>>| {
            g.map(|mut v| {
                v.resize(dim, 0.0);
                v
            })
        };

        let (vel, g_vel) = temporal_term(&zc, &[&pc[0]]);
        let (accel, g_accel) = temporal_term(&zc, &[&pc[0], &pc[1]]);
        let (jerk, g_jerk) = temporal_term(&zc, &[&pc[0], &pc[1], &pc[2]]);
        let (sync, g_sync) = sync_term(&zc, &pc[0]);

        let phys = self.denormalize(z);
        let pos = |v: &Vec<f64>| [v[0], v[1], v[2]];
        let (ee, g_ee_phys) = ee_term(pos(&phys.left), pos(&phys.right), self.config.d_safe);
        let jt = joint_term(
            &self.geoms,
            ArmPair::new([phys.left[0], phys.left[1]], [phys.right[0], phys.right[1]]),
            h.joints(),
            self.config.d_safe_joint,
        )?;

        let std = ArmPair::new(&self.normalizers.left.std, &self.normalizers.right.std);
        let mut g_ee = ArmPair::new(vec![0.0; dim], vec![0.0; dim]);
        let mut g_joint = ArmPair::new(vec![0.0; dim], vec![0.0; dim]);
        for k in 0..3 {
            g_ee.left[k] = g_ee_phys.left[k] * std.left[k];
            g_ee.right[k] = g_ee_phys.right[k] * std.right[k];
        }
        for k in 0..2 {
            g_joint.left[k] = jt.grad.left[k] * std.left[k];
            g_joint.right[k] = jt.grad.right[k] * std.right[k];
        }

        let weight_input = self.weight_net.input(z, &past[0])?;
        let weights = if mask.is_empty() {
            [0.0; NUM_TERMS]
        } else {
            masked_softmax(&self.weight_net.logits(&weight_input)?, &mask)
        };
        Ok(CoordAnalysis {
            values: [vel, accel, jerk, sync, ee, jt.value],
            gradients: [widen(g_vel), widen(g_accel), widen(g_jerk), widen(g_sync), g_ee, g_joint],
            weights,
            weight_input,
            ik_flagged: jt.flagged,
            joints: jt.joints,
        })
    }

    pub fn coord_energy(&self, z: &ArmPair<Vec<f64>>, h: &PoseHistory) -> Result<EnergyBreakdown> {
        Ok(self.analyze(z, h)?.breakdown())
    }

    pub fn coord_gradient(&self, z: &ArmPair<Vec<f64>>, h: &PoseHistory) -> Result<ArmPair<Vec<f64>>> {
        Ok(self.analyze(z, h)?.weighted_gradient())
    }

    /// Predicted weights at `z`, ignoring the term mask.
    pub fn predict_weights(&self, z: &ArmPair<Vec<f64>>, h: &PoseHistory) -> Result<[f64; NUM_TERMS]> {
        let past = self.normalize_action(h.previous(1));
        let logits = self.weight_net.logits(&self.weight_net.input(z, &past)?)?;
        Ok(masked_softmax(&logits, &TermMask::all()))
    }
}

/// `E_total = E_comp + E_coord`; without a coordinator the coordination part is 0.
pub fn total_energy(
    field: &dyn BimanualField,
    coordinator: Option<&Coordinator>,
    z: &ArmPair<Vec<f64>>,
    h: &PoseHistory,
    t: f64,
    conds: &ArmPair<Conditioning>,
) -> Result<EnergyBreakdown> {
    let e_comp = field.energy_proxy(z, t, conds)?;
    let coord = match coordinator {
        Some(c) => c.coord_energy(z, h)?,
        None => EnergyBreakdown::default(),
    };
    Ok(coord.with_comp(e_comp))
}
