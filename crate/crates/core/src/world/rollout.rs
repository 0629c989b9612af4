use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::demos::next_joints;
use super::{ee_distance, episode_seed, judge, TaskInstance, TaskKind, TaskSpec, Verdict};
use crate::composition::{ArmPair, BimanualAction, BimanualField};
use crate::coordination::{Coordinator, EnergyBreakdown, PoseHistory};
use crate::kinematics::{ArmAction, ArmGeometry};
use crate::numerics::derive_seed;
use crate::policy::{Conditioning, Normalizer};
use crate::sampler::{denoise, DenoiseTrace, SampleContext, SamplerConfig, Termination};
use crate::{Error, Result};

/// What a controller sees before control step `step`.
pub struct StepInput<'a> {
    pub spec: &'a TaskSpec,
    pub instance: &'a TaskInstance,
    pub step: usize,
    pub current: &'a BimanualAction,
    pub history: &'a PoseHistory,
    pub conds: &'a ArmPair<Conditioning>,
    pub seed: u64,
}

pub struct StepOutput {
    pub action: BimanualAction,
    pub breakdown: EnergyBreakdown,
    pub trace: Option<DenoiseTrace>,
}

pub trait Controller: Sync {
    fn act(&self, input: &StepInput) -> Result<StepOutput>;
}

/// Samples each action with the configured denoising strategy.
pub struct FlowController<'a> {
    pub field: &'a dyn BimanualField,
    pub coordinator: Option<&'a Coordinator>,
    pub normalizers: ArmPair<Normalizer>,
    pub sampler: SamplerConfig,
}

impl Controller for FlowController<'_> {
    fn act(&self, input: &StepInput) -> Result<StepOutput> {
        let ctx = SampleContext {
            field: self.field,
            coordinator: self.coordinator,
            normalizers: &self.normalizers,
            history: input.history,
            conds: input.conds,
        };
        let (_, action, trace) = denoise(&ctx, &self.sampler.with_seed(input.seed))?;
        Ok(StepOutput { action, breakdown: trace.final_breakdown, trace: Some(trace) })
    }
}

/// Replays the noise-free coordinated script of the episode's instance.
pub struct ReplayController;

impl Controller for ReplayController {
    fn act(&self, input: &StepInput) -> Result<StepOutput> {
        Ok(StepOutput {
            action: input.instance.scripted(input.step + 1),
            breakdown: EnergyBreakdown::default(),
            trace: None,
        })
    }
}

/// Commands the current pose: no motion.
pub struct ZeroController;

impl Controller for ZeroController {
    fn act(&self, input: &StepInput) -> Result<StepOutput> {
        Ok(StepOutput { action: *input.current, breakdown: EnergyBreakdown::default(), trace: None })
    }
}

fn execute_arm(geom: &ArmGeometry, current: &ArmAction, commanded: &ArmAction, max_step: f64) -> ArmAction {
    let [cx, cy] = current.planar_position();
    let (mut dx, mut dy) = (commanded.position[0] - cx, commanded.position[1] - cy);
    let d = dx.hypot(dy);
    if d > max_step {
        dx *= max_step / d;
        dy *= max_step / d;
    }
    let mut target = [cx + dx, cy + dy];
    if !geom.reachable(target) {
        target = geom.project_to_workspace(target);
    }
    ArmAction::planar(target[0], target[1], commanded.orientation[0], commanded.gripper.clamp(0.0, 1.0))
}

/// Kinematic execution: planar pose, displacement clamped to `max_step`,
/// kept inside the workspace, gripper clamped to `[0, 1]`.
pub fn execute(spec: &TaskSpec, current: &BimanualAction, commanded: &BimanualAction) -> BimanualAction {
    ArmPair::new(
        execute_arm(&spec.geoms.left, &current.left, &commanded.left, spec.max_step),
        execute_arm(&spec.geoms.right, &current.right, &commanded.right, spec.max_step),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    Collision,
    Timeout,
    GoalMiss,
    Divergence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub commanded: BimanualAction,
    pub executed: BimanualAction,
    pub breakdown: EnergyBreakdown,
    pub steps_used: usize,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub termination: Option<Termination>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task: TaskKind,
    pub episode: usize,
    pub seed: u64,
    pub success: bool,
    pub failure: Option<FailureReason>,
    pub min_ee_distance: f64,
    pub min_joint_distance: f64,
    pub mean_denoise_steps: f64,
    pub max_denoise_steps: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<StepRecord>,
}

impl EpisodeResult {
    pub fn without_steps(&self) -> Self {
        Self { steps: Vec::new(), ..self.clone() }
    }

    pub fn collided(&self, d_safe: f64) -> bool {
        self.min_ee_distance < d_safe
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::SamplerDiverged { .. } | Error::NonFinite(_))
}

/// Runs one closed-loop episode of `spec` with instance seed `seed`.
pub fn rollout(spec: &TaskSpec, controller: &dyn Controller, episode: usize, seed: u64) -> Result<EpisodeResult> {
    let inst = spec.instance(seed);
    let mut current = inst.start();
    let mut joints = spec.initial_joints(&current)?;
    let mut history = PoseHistory::new(current, joints);
    let mut poses = vec![current];
    let mut steps = Vec::with_capacity(spec.episode_len);
    let mut min_ee = ee_distance(&current);
    let mut min_joint = joints.left.distance(&joints.right);
    let mut diverged = false;

    for k in 0..spec.episode_len {
        let conds = spec.conditioning(&inst, k, &current);
        let input = StepInput {
            spec,
            instance: &inst,
            step: k,
            current: &current,
            history: &history,
            conds: &conds,
            seed: derive_seed(seed, &[0x5a, k as u64]),
        };
        let out = match controller.act(&input) {
            Ok(out) if out.action.is_finite() => out,
            Ok(_) => {
                diverged = true;
                break;
            }
            Err(e) if is_divergence(&e) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let executed = execute(spec, &current, &out.action);
        joints = next_joints(spec, &executed, &joints)?;
        history.push(executed, joints);
        min_ee = min_ee.min(ee_distance(&executed));
        min_joint = min_joint.min(joints.left.distance(&joints.right));
        steps.push(StepRecord {
            step: k,
            commanded: out.action,
            executed,
            breakdown: out.breakdown,
            steps_used: out.trace.as_ref().map_or(0, |t| t.steps_used),
            initial_energy: out.trace.as_ref().map_or(0.0, |t| t.initial_energy),
            final_energy: out.trace.as_ref().map_or(0.0, |t| t.final_energy()),
            termination: out.trace.as_ref().map(|t| t.termination),
        });
        current = executed;
        poses.push(current);
    }

    let failure = if diverged {
        Some(FailureReason::Divergence)
    } else if min_ee < spec.d_safe {
        Some(FailureReason::Collision)
    } else {
        match judge(spec, &inst, &poses) {
            Verdict::Success => None,
            Verdict::Late => Some(FailureReason::Timeout),
            Verdict::Miss => Some(FailureReason::GoalMiss),
        }
    };
    let used: Vec<usize> = steps.iter().map(|s| s.steps_used).collect();
    let mean_steps = if used.is_empty() { 0.0 } else { used.iter().sum::<usize>() as f64 / used.len() as f64 };
    Ok(EpisodeResult {
        task: spec.kind,
        episode,
        seed,
        success: failure.is_none(),
        failure,
        min_ee_distance: min_ee,
        min_joint_distance: min_joint,
        mean_denoise_steps: mean_steps,
        max_denoise_steps: used.iter().copied().max().unwrap_or(0),
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: TaskKind,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub collisions: usize,
    pub collision_rate: f64,
    pub mean_denoise_steps: f64,
    pub min_ee_distance: f64,
    pub episode_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub master_seed: u64,
    pub episodes_per_task: usize,
    pub tasks: Vec<TaskSummary>,
    pub mean_success: f64,
    pub mean_collision_rate: f64,
    pub mean_denoise_steps: f64,
    pub episodes: Vec<EpisodeResult>,
}

impl SuiteReport {
    /// Aggregates episode results grouped by task, in first-seen task order.
    pub fn from_episodes(master_seed: u64, episodes_per_task: usize, episodes: Vec<EpisodeResult>, d_safe: &[(TaskKind, f64)]) -> Self {
        let mut kinds: Vec<TaskKind> = Vec::new();
        for e in &episodes {
            if !kinds.contains(&e.task) {
                kinds.push(e.task);
            }
        }
        let tasks: Vec<TaskSummary> = kinds
            .iter()
            .map(|&kind| {
                let eps: Vec<&EpisodeResult> = episodes.iter().filter(|e| e.task == kind).collect();
                let safe = d_safe.iter().find(|(k, _)| *k == kind).map_or(0.0, |(_, d)| *d);
                let n = eps.len();
                let successes = eps.iter().filter(|e| e.success).count();
                let collisions = eps.iter().filter(|e| e.collided(safe)).count();
                TaskSummary {
                    task: kind,
                    episodes: n,
                    successes,
                    success_rate: successes as f64 / n as f64,
                    collisions,
                    collision_rate: collisions as f64 / n as f64,
                    mean_denoise_steps: eps.iter().map(|e| e.mean_denoise_steps).sum::<f64>() / n as f64,
                    min_ee_distance: eps.iter().map(|e| e.min_ee_distance).fold(f64::INFINITY, f64::min),
                    episode_seeds: eps.iter().map(|e| e.seed).collect(),
                }
            })
            .collect();
        let m = tasks.len().max(1) as f64;
        Self {
            master_seed,
            episodes_per_task,
            mean_success: tasks.iter().map(|t| t.success_rate).sum::<f64>() / m,
            mean_collision_rate: tasks.iter().map(|t| t.collision_rate).sum::<f64>() / m,
            mean_denoise_steps: tasks.iter().map(|t| t.mean_denoise_steps).sum::<f64>() / m,
            tasks,
            episodes,
        }
    }
}

/// Runs `episodes_per_task` episodes of every task, in parallel. Episode `k`
/// of a task always gets the same seed, whatever else is in the batch.
pub fn evaluate_suite(
    tasks: &[TaskSpec],
    controller: &dyn Controller,
    episodes_per_task: usize,
    seed: u64,
) -> Result<SuiteReport> {
    if episodes_per_task == 0 {
        return Err(Error::InvalidArgument("episodes_per_task must be >= 1".into()));
    }
    for spec in tasks {
        spec.validate()?;
    }
    let jobs: Vec<(&TaskSpec, usize)> =
        tasks.iter().flat_map(|spec| (0..episodes_per_task).map(move |k| (spec, k))).collect();
    let episodes = jobs
        .par_iter()
        .map(|&(spec, k)| rollout(spec, controller, k, episode_seed(seed, spec.kind.index(), k)))
        .collect::<Result<Vec<_>>>()?;
    let safe: Vec<(TaskKind, f64)> = tasks.iter().map(|t| (t.kind, t.d_safe)).collect();
    Ok(SuiteReport::from_episodes(seed, episodes_per_task, episodes, &safe))
}
