use serde::{Deserialize, Serialize};

use super::{ee_distance, planar_action, PlanarPose, Side, TaskInstance, TaskKind, TaskSpec};
use crate::composition::{ArmPair, BimanualAction, JointPolicy};
use crate::coordination::{PoseHistory, WeightDemo};
use crate::kinematics::{inverse_kin, ArmAction, ArmGeometry, JointConfig};
use crate::numerics::{derive_seed, SeededRng};
use crate::policy::{Conditioning, TrainingPair};
use crate::{Error, Result};

const MAX_ATTEMPTS: u64 = 32;

/// One arm demonstrated on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnimanualDemo {
    pub task: TaskKind,
    pub side: Side,
    pub seed: u64,
    /// Executed poses, `episode_len + 1` of them; `poses[0]` is the start.
    pub poses: Vec<ArmAction>,
    /// Conditioning before step `k` and the action taken, `poses[k + 1]`.
    pub steps: Vec<(Conditioning, ArmAction)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoStep {
    pub conds: ArmPair<Conditioning>,
    pub action: BimanualAction,
}

/// A coordinated two-arm demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub task: TaskKind,
    pub seed: u64,
    pub poses: Vec<BimanualAction>,
    pub steps: Vec<DemoStep>,
}

fn noisy_poses(
    spec: &TaskSpec,
    script: &super::ArmScript,
    rng: &mut SeededRng,
) -> Vec<PlanarPose> {
    (0..=spec.episode_len)
        .map(|k| {
            let mut p = script.pose_at(k);
            if k > 0 && spec.demo_noise > 0.0 {
                p[0] += spec.demo_noise * rng.standard_normal();
                p[1] += spec.demo_noise * rng.standard_normal();
            }
            p
        })
        .collect()
}

fn feasible(spec: &TaskSpec, geom: &ArmGeometry, poses: &[PlanarPose]) -> bool {
    poses.iter().all(|p| geom.reachable([p[0], p[1]]))
        && poses.windows(2).all(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]) <= spec.max_step)
}

fn arm_trace(spec: &TaskSpec, inst: &TaskInstance, side: Side, seed: u64) -> Result<Vec<PlanarPose>> {
    let (script, geom) = match side {
        Side::Left => (&inst.scripts.left, &spec.geoms.left),
        Side::Right => (&inst.scripts.right, &spec.geoms.right),
    };
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = SeededRng::new(derive_seed(seed, &[side as u64, attempt]));
        let poses = noisy_poses(spec, script, &mut rng);
        if feasible(spec, geom, &poses) {
            return Ok(poses);
        }
    }
    Err(Error::InvalidArgument(format!("task {}: no feasible demonstration for seed {seed}", spec.kind.name())))
}

/// `n` single-arm demonstrations of `side`, each from its own randomized
/// instance with independent timing.
pub fn gen_unimanual_demos(spec: &TaskSpec, side: Side, n: usize, seed: u64) -> Result<Vec<UnimanualDemo>> {
    spec.validate()?;
    (0..n)
        .map(|i| {
            let demo_seed = derive_seed(seed, &[0xd1, spec.kind.index() as u64, side as u64, i as u64]);
            let inst = spec.solo_instance(demo_seed);
            let trace = arm_trace(spec, &inst, side, demo_seed)?;
            let poses: Vec<ArmAction> = trace.iter().map(|p| planar_action(*p)).collect();
            let steps = (0..spec.episode_len)
                .map(|k| {
                    let current = ArmPair::new(poses[k], poses[k]);
                    let conds = spec.conditioning(&inst, k, &current);
                    let cond = match side {
                        Side::Left => conds.left,
                        Side::Right => conds.right,
                    };
                    (cond, poses[k + 1])
                })
                .collect();
            Ok(UnimanualDemo { task: spec.kind, side, seed: demo_seed, poses, steps })
        })
        .collect()
}

/// `n` coordinated demonstrations: shared timing, collision-free.
pub fn gen_bimanual_demos(spec: &TaskSpec, n: usize, seed: u64) -> Result<Vec<Demonstration>> {
    spec.validate()?;
    (0..n)
        .map(|i| {
            let demo_seed = derive_seed(seed, &[0xb1, spec.kind.index() as u64, i as u64]);
            let inst = spec.instance(demo_seed);
            for attempt in 0..MAX_ATTEMPTS {
                let s = derive_seed(demo_seed, &[attempt]);
                let left = arm_trace(spec, &inst, Side::Left, s)?;
                let right = arm_trace(spec, &inst, Side::Right, s)?;
                let poses: Vec<BimanualAction> = left
                    .iter()
                    .zip(&right)
                    .map(|(l, r)| ArmPair::new(planar_action(*l), planar_action(*r)))
                    .collect();
                if poses.iter().all(|p| ee_distance(p) >= spec.d_safe) {
                    return Ok(bimanual_from_poses(spec, &inst, demo_seed, poses));
                }
            }
            Err(Error::InvalidArgument(format!(
                "task {}: no collision-free demonstration for seed {demo_seed}",
                spec.kind.name()
            )))
        })
        .collect()
}

fn bimanual_from_poses(spec: &TaskSpec, inst: &TaskInstance, seed: u64, poses: Vec<BimanualAction>) -> Demonstration {
    let steps = (0..spec.episode_len)
        .map(|k| DemoStep { conds: spec.conditioning(inst, k, &poses[k]), action: poses[k + 1] })
        .collect();
    Demonstration { task: spec.kind, seed, poses, steps }
}

/// Regression rows for one arm's unimanual policy.
pub fn unimanual_training_pairs<'a>(demos: impl IntoIterator<Item = &'a UnimanualDemo>) -> Vec<TrainingPair> {
    demos
        .into_iter()
        .flat_map(|d| d.steps.iter())
        .map(|(cond, action)| TrainingPair { cond: cond.clone(), action: action.to_array().to_vec() })
        .collect()
}

/// Regression rows for a single policy over the joint 14-dim action.
pub fn bimanual_training_pairs<'a>(demos: impl IntoIterator<Item = &'a Demonstration>) -> Vec<TrainingPair> {
    demos
        .into_iter()
        .flat_map(|d| d.steps.iter())
        .map(|s| {
            let mut action = s.action.left.to_array().to_vec();
            action.extend_from_slice(&s.action.right.to_array());
            TrainingPair { cond: JointPolicy::joint_conditioning(&s.conds), action }
        })
        .collect()
}

/// Per-step imitation targets for the weight predictor, with the executed
/// history and IK joint state at each step.
pub fn weight_demos(spec: &TaskSpec, demos: &[Demonstration]) -> Result<Vec<WeightDemo>> {
    let mut out = Vec::new();
    for d in demos {
        let mut joints = spec.initial_joints(&d.poses[0])?;
        for (k, step) in d.steps.iter().enumerate() {
            let recent: Vec<BimanualAction> = (0..=k).rev().take(3).map(|j| d.poses[j]).collect();
            let history = PoseHistory::from_recent(&recent, joints)?;
            out.push(WeightDemo { conds: step.conds.clone(), history, target: step.action });
            joints = next_joints(spec, &step.action, &joints)?;
        }
    }
    Ok(out)
}

pub(super) fn next_joints(
    spec: &TaskSpec,
    a: &BimanualAction,
    seeds: &ArmPair<JointConfig>,
) -> Result<ArmPair<JointConfig>> {
    Ok(ArmPair::new(
        inverse_kin(&spec.geoms.left, a.left.planar_position(), &seeds.left)?,
        inverse_kin(&spec.geoms.right, a.right.planar_position(), &seeds.right)?,
    ))
}
