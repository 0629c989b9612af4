//! A planar two-arm desk: three scripted bimanual tasks, demonstration
//! generators, closed-loop kinematic rollouts and success scoring.

mod demos;
mod rollout;

pub use demos::{
    bimanual_training_pairs, gen_bimanual_demos, gen_unimanual_demos, unimanual_training_pairs,
    weight_demos, DemoStep, Demonstration, UnimanualDemo,
};
pub use rollout::{
    evaluate_suite, execute, rollout, Controller, EpisodeResult, FailureReason, FlowController,
    ReplayController, StepInput, StepOutput, StepRecord, SuiteReport, TaskSummary, ZeroController,
};

use serde::{Deserialize, Serialize};

use crate::composition::{ArmPair, BimanualAction};
use crate::kinematics::{inverse_kin, ArmAction, ArmGeometry, JointConfig};
use crate::numerics::{derive_seed, SeededRng};
use crate::policy::Conditioning;
use crate::{Error, Result};

/// Number of task kinds; the instruction one-hot has this width.
pub const NUM_TASKS: usize = 3;
/// Observation width: three landmarks and the episode progress.
pub const OBSERVATION_DIM: usize = 7;
/// Proprioception width: planar position, yaw, gripper.
pub const PROPRIO_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Both arms reach mirrored goals a few millimetres either side of a
    /// central point, converging on each other.
    MirroredReach,
    /// Both arms grasp a bar and must lift it together.
    SyncLift,
    /// The left arm brings an object to a transfer point, the right arm
    /// takes it over and places it; the arms must hold a distance band
    /// during the transfer.
    Handover,
}

impl TaskKind {
    pub const ALL: [TaskKind; NUM_TASKS] = [TaskKind::MirroredReach, TaskKind::SyncLift, TaskKind::Handover];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::MirroredReach => "mirrored_reach",
            TaskKind::SyncLift => "sync_lift",
            TaskKind::Handover => "handover",
        }
    }

    pub fn one_hot(self) -> Vec<f64> {
        let mut v = vec![0.0; NUM_TASKS];
        v[self.index()] = 1.0;
        v
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s || k.name().replace('_', "-") == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task `{s}`")))
    }
}

/// Closed interval sampled uniformly.
pub type Range = [f64; 2];

fn draw(rng: &mut SeededRng, r: Range) -> f64 {
    rng.uniform_range(r[0], r[1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub geoms: ArmPair<ArmGeometry>,
    pub episode_len: usize,
    /// Std of the per-step position jitter added to demonstrations (m).
    pub demo_noise: f64,
    /// Largest executed end-effector displacement per control step (m).
    pub max_step: f64,
    pub goal_tolerance: f64,
    /// Success is judged on this many final steps.
    pub final_window: usize,
    /// Allowed timing mismatch (steps) for simultaneity predicates.
    pub sync_window: usize,
    pub d_safe: f64,
    /// Left-arm start region; the right arm starts mirrored.
    pub start_x: Range,
    pub start_y: Range,
    /// Heights of the task's landmarks (meeting point, bar, pick/transfer/place).
    pub landmark_y: [Range; 3],
    /// Goal separation at the meeting point or transfer point (m).
    pub gap: f64,
    /// Inter-arm distance band required during the transfer (m).
    pub distance_band: Range,
    /// Largest timing offset (steps) of a scripted phase.
    pub timing_jitter: usize,
}

impl TaskSpec {
    fn base(kind: TaskKind) -> Self {
        Self {
            kind,
            geoms: ArmPair::new(ArmGeometry::default_left(), ArmGeometry::default_right()),
            episode_len: 0,
            demo_noise: 0.004,
            max_step: 0.05,
            goal_tolerance: 0.02,
            final_window: 5,
            sync_window: 2,
            d_safe: crate::coordination::D_SAFE,
            start_x: [-0.32, -0.28],
            start_y: [0.38, 0.42],
            landmark_y: [[0.55, 0.60]; 3],
            gap: 0.0,
            distance_band: [0.0, f64::MAX],
            timing_jitter: 0,
        }
    }

    pub fn mirrored_reach() -> Self {
        Self { episode_len: 26, gap: 0.006, timing_jitter: 2, ..Self::base(TaskKind::MirroredReach) }
    }

    pub fn sync_lift() -> Self {
        Self {
            episode_len: 28,
            start_x: [-0.30, -0.26],
            start_y: [0.28, 0.32],
            landmark_y: [[0.40, 0.46]; 3],
            timing_jitter: 4,
            ..Self::base(TaskKind::SyncLift)
        }
    }

    pub fn handover() -> Self {
        Self {
            episode_len: 36,
            start_x: [-0.28, -0.24],
            start_y: [0.28, 0.32],
            landmark_y: [[0.38, 0.42], [0.48, 0.52], [0.38, 0.42]],
            gap: 0.04,
            distance_band: [0.03, 0.05],
            timing_jitter: 2,
            ..Self::base(TaskKind::Handover)
        }
    }

    pub fn suite() -> Vec<Self> {
        vec![Self::mirrored_reach(), Self::sync_lift(), Self::handover()]
    }

    pub fn default_for(kind: TaskKind) -> Self {
        match kind {
            TaskKind::MirroredReach => Self::mirrored_reach(),
            TaskKind::SyncLift => Self::sync_lift(),
            TaskKind::Handover => Self::handover(),
        }
    }

    /// Checks that every instance the ranges allow is reachable and
    /// executable within `max_step`, and that the schedule leaves
    /// `final_window` holding steps.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("task {}: {msg}", self.kind.name())));
        if !(self.max_step > 0.0) || !(self.goal_tolerance > 0.0) || !(self.d_safe >= 0.0) || !(self.demo_noise >= 0.0) {
            return bad("max_step, goal_tolerance, d_safe and demo_noise must be positive".into());
        }
        if self.final_window == 0 {
            return bad("final_window must be >= 1".into());
        }
        let last = schedule_end(self.kind) + self.timing_jitter;
        if self.episode_len < crate::coordination::HISTORY_DEPTH + 1 || last + self.final_window > self.episode_len {
            return bad(format!(
                "episode length {} too short for a schedule ending at step {last} plus {} holding steps",
                self.episode_len, self.final_window
            ));
        }
        // Corners of the parameter box bound every segment length.
        for corner in 0..(1u32 << 5) {
            let pick = |r: Range, bit: u32| if corner & (1 << bit) == 0 { r[0] } else { r[1] };
            let params = InstanceParams {
                start_left: [pick(self.start_x, 0), pick(self.start_y, 1)],
                start_right: [-pick(self.start_x, 0), pick(self.start_y, 1)],
                landmark_y: [
                    pick(self.landmark_y[0], 2),
                    pick(self.landmark_y[1], 3),
                    pick(self.landmark_y[2], 4),
                ],
            };
            let inst = self.instance_from(params, ArmPair::new(0, 0), 0);
            for (side, script) in [("left", &inst.scripts.left), ("right", &inst.scripts.right)] {
                let geom = if side == "left" { &self.geoms.left } else { &self.geoms.right };
                for w in script.waypoints() {
                    if !geom.reachable([w[0], w[1]]) {
                        return bad(format!("{side} waypoint ({:.3}, {:.3}) unreachable", w[0], w[1]));
                    }
                }
                let peak = script.peak_step();
                if peak > self.max_step {
                    return bad(format!("{side} script needs {peak:.4} m per step, above max_step {}", self.max_step));
                }
            }
        }
        Ok(())
    }

    /// A random instance; timing offsets are shared between the arms.
    pub fn instance(&self, seed: u64) -> TaskInstance {
        let mut rng = SeededRng::new(derive_seed(seed, &[0x7a5c]));
        let params = self.draw_params(&mut rng);
        let offset = rng.below(self.timing_jitter + 1);
        self.instance_from(params, ArmPair::new(offset, offset), seed)
    }

    /// Like [`TaskSpec::instance`] but with independent per-arm timing, as
    /// seen by an arm demonstrated on its own.
    pub fn solo_instance(&self, seed: u64) -> TaskInstance {
        let mut rng = SeededRng::new(derive_seed(seed, &[0x7a5c]));
        let params = self.draw_params(&mut rng);
        let left = rng.below(self.timing_jitter + 1);
        let right = rng.below(self.timing_jitter + 1);
        self.instance_from(params, ArmPair::new(left, right), seed)
    }

    fn draw_params(&self, rng: &mut SeededRng) -> InstanceParams {
        let start_left = [draw(rng, self.start_x), draw(rng, self.start_y)];
        let start_right = [-draw(rng, self.start_x), draw(rng, self.start_y)];
        let landmark_y = [draw(rng, self.landmark_y[0]), draw(rng, self.landmark_y[1]), draw(rng, self.landmark_y[2])];
        InstanceParams { start_left, start_right, landmark_y }
    }

    fn instance_from(&self, p: InstanceParams, offsets: ArmPair<usize>, seed: u64) -> TaskInstance {
        let half = self.gap / 2.0;
        let (landmarks, scripts) = match self.kind {
            TaskKind::MirroredReach => {
                let y = p.landmark_y[0];
                let goal_l = [-half, y];
                let goal_r = [half, y];
                let reach = |start: [f64; 2], goal: [f64; 2], yaw: f64, o: usize| {
                    ArmScript::new([start[0], start[1], 0.0, 0.0]).then(o, o + 18, [goal[0], goal[1], yaw, 1.0])
                };
                (
                    [[0.0, y], goal_l, goal_r],
                    ArmPair::new(
                        reach(p.start_left, goal_l, 0.3, offsets.left),
                        reach(p.start_right, goal_r, -0.3, offsets.right),
                    ),
                )
            }
            TaskKind::SyncLift => {
                let y = p.landmark_y[0];
                let lift = SYNC_LIFT_HEIGHT;
                let arm = |start: [f64; 2], sign: f64, o: usize| {
                    let gx = sign * 0.16;
                    ArmScript::new([start[0], start[1], 0.0, 0.0])
                        .then(0, 10, [gx, y, 0.0, 0.0])
                        .then(10, 12, [gx, y, 0.0, 1.0])
                        .then(13 + o, 19 + o, [gx, y + lift, 0.0, 1.0])
                };
                (
                    [[0.0, y], [-0.16, y + lift], [0.16, y + lift]],
                    ArmPair::new(arm(p.start_left, -1.0, offsets.left), arm(p.start_right, 1.0, offsets.right)),
                )
            }
            TaskKind::Handover => {
                let pick = [-0.16, p.landmark_y[0]];
                let transfer = [0.0, p.landmark_y[1]];
                let place = [0.16, p.landmark_y[2]];
                let retreat = [-0.14, pick[1] - 0.02];
                let (xl, xr) = ([transfer[0] - half, transfer[1]], [transfer[0] + half, transfer[1]]);
                let o = offsets.left;
                let left = ArmScript::new([p.start_left[0], p.start_left[1], 0.0, 0.0])
                    .then(o, o + 8, [pick[0], pick[1], 0.0, 0.0])
                    .then(o + 8, o + 9, [pick[0], pick[1], 0.0, 1.0])
                    .then(o + 9, o + 17, [xl[0], xl[1], 0.0, 1.0])
                    .then(o + 20, o + 21, [xl[0], xl[1], 0.0, 0.0])
                    .then(o + 21, o + 29, [retreat[0], retreat[1], 0.0, 0.0]);
                let o = offsets.right;
                let right = ArmScript::new([p.start_right[0], p.start_right[1], 0.0, 0.0])
                    .then(o + 3, o + 17, [xr[0], xr[1], 0.0, 0.0])
                    .then(o + 18, o + 20, [xr[0], xr[1], 0.0, 1.0])
                    .then(o + 21, o + 29, [place[0], place[1], 0.0, 1.0]);
                ([pick, transfer, place], ArmPair::new(left, right))
            }
        };
        TaskInstance { kind: self.kind, seed, landmarks, scripts, offsets }
    }

    /// Per-arm conditioning at control step `step` with the arms at `current`.
    pub fn conditioning(&self, inst: &TaskInstance, step: usize, current: &BimanualAction) -> ArmPair<Conditioning> {
        let mut observation: Vec<f64> = inst.landmarks.iter().flatten().copied().collect();
        observation.push(step as f64 / self.episode_len as f64);
        let proprio = |a: &ArmAction| vec![a.position[0], a.position[1], a.orientation[0], a.gripper];
        ArmPair::new(
            Conditioning::new(observation.clone(), proprio(&current.left), self.kind.one_hot()),
            Conditioning::new(observation, proprio(&current.right), self.kind.one_hot()),
        )
    }

    /// Initial joint configuration of each arm at `start`.
    pub fn initial_joints(&self, start: &BimanualAction) -> Result<ArmPair<JointConfig>> {
        let seeds = ArmPair::new(JointConfig::new(1.2, -1.6), JointConfig::new(1.94, 1.6));
        Ok(ArmPair::new(
            inverse_kin(&self.geoms.left, start.left.planar_position(), &seeds.left)?,
            inverse_kin(&self.geoms.right, start.right.planar_position(), &seeds.right)?,
        ))
    }
}

const SYNC_LIFT_HEIGHT: f64 = 0.14;

/// Last scripted step (without timing offsets) per task kind.
fn schedule_end(kind: TaskKind) -> usize {
    match kind {
        TaskKind::MirroredReach => 18,
        TaskKind::SyncLift => 19,
        TaskKind::Handover => 29,
    }
}

struct InstanceParams {
    start_left: [f64; 2],
    start_right: [f64; 2],
    landmark_y: [f64; 3],
}

/// `10s³ - 15s⁴ + 6s⁵`.
pub fn min_jerk(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 + s * (-15.0 + 6.0 * s))
}

/// Planar pose `[x, y, yaw, gripper]`.
pub type PlanarPose = [f64; 4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Segment {
    start: usize,
    end: usize,
    to: PlanarPose,
}

/// Piecewise minimum-jerk schedule of one arm; the pose holds between segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmScript {
    start: PlanarPose,
    segments: Vec<Segment>,
}

impl ArmScript {
    pub fn new(start: PlanarPose) -> Self {
        Self { start, segments: Vec::new() }
    }

    /// Moves to `to` over steps `start..=end`.
    pub fn then(mut self, start: usize, end: usize, to: PlanarPose) -> Self {
        self.segments.push(Segment { start, end: end.max(start + 1), to });
        self
    }

    pub fn pose_at(&self, step: usize) -> PlanarPose {
        let mut from = self.start;
        for seg in &self.segments {
            if step <= seg.start {
                return from;
            }
            if step < seg.end {
                let s = min_jerk((step - seg.start) as f64 / (seg.end - seg.start) as f64);
                return std::array::from_fn(|k| from[k] + s * (seg.to[k] - from[k]));
            }
            from = seg.to;
        }
        from
    }

    pub fn waypoints(&self) -> impl Iterator<Item = PlanarPose> + '_ {
        std::iter::once(self.start).chain(self.segments.iter().map(|s| s.to))
    }

    pub fn end_step(&self) -> usize {
        self.segments.iter().map(|s| s.end).max().unwrap_or(0)
    }

    /// Largest per-step planar displacement along the schedule.
    pub fn peak_step(&self) -> f64 {
        (0..self.end_step())
            .map(|k| {
                let (a, b) = (self.pose_at(k), self.pose_at(k + 1));
                (b[0] - a[0]).hypot(b[1] - a[1])
            })
            .fold(0.0, f64::max)
    }

    pub fn final_pose(&self) -> PlanarPose {
        self.waypoints().last().unwrap_or(self.start)
    }
}

pub fn planar_action(p: PlanarPose) -> ArmAction {
    ArmAction::planar(p[0], p[1], p[2], p[3])
}

/// One randomized episode of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub seed: u64,
    pub landmarks: [[f64; 2]; 3],
    pub scripts: ArmPair<ArmScript>,
    pub offsets: ArmPair<usize>,
}

impl TaskInstance {
    pub fn start(&self) -> BimanualAction {
        self.scripted(0)
    }

    /// The scripted bimanual pose at `step`.
    pub fn scripted(&self, step: usize) -> BimanualAction {
        ArmPair::new(planar_action(self.scripts.left.pose_at(step)), planar_action(self.scripts.right.pose_at(step)))
    }

    pub fn goals(&self) -> ArmPair<PlanarPose> {
        ArmPair::new(self.scripts.left.final_pose(), self.scripts.right.final_pose())
    }
}

pub fn ee_distance(a: &BimanualAction) -> f64 {
    let (l, r) = (a.left.position, a.right.position);
    ((l[0] - r[0]).powi(2) + (l[1] - r[1]).powi(2) + (l[2] - r[2]).powi(2)).sqrt()
}

/// Outcome of the task-specific success test on an executed pose sequence
/// `poses[0..=T]` (`poses[0]` is the start).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Success,
    /// Goals met at the final step but not held over the whole final window.
    Late,
    Miss,
}

pub fn judge(spec: &TaskSpec, inst: &TaskInstance, poses: &[BimanualAction]) -> Verdict {
    let goals = inst.goals();
    let near = |a: &ArmAction, g: &PlanarPose| (a.position[0] - g[0]).hypot(a.position[1] - g[1]) <= spec.goal_tolerance;
    let at_goal = |p: &BimanualAction| near(&p.left, &goals.left) && near(&p.right, &goals.right);
    let Some(last) = poses.last() else { return Verdict::Miss };
    let window = &poses[poses.len().saturating_sub(spec.final_window)..];
    let held = window.iter().all(at_goal);

    let grip = |p: &BimanualAction, l: bool, r: bool| (p.left.gripper >= 0.5) == l && (p.right.gripper >= 0.5) == r;
    let task_ok = match spec.kind {
        TaskKind::MirroredReach => grip(last, true, true),
        TaskKind::SyncLift => {
            let base = inst.landmarks[0][1];
            let onset = |y: fn(&BimanualAction) -> f64| poses.iter().position(|p| y(p) > base + 0.01);
            match (onset(|p| p.left.position[1]), onset(|p| p.right.position[1])) {
                (Some(l), Some(r)) => l.abs_diff(r) <= spec.sync_window && grip(last, true, true),
                _ => false,
            }
        }
        TaskKind::Handover => {
            // The left gripper must release while the right one already holds
            // and the arms sit inside the band.
            let [lo, hi] = spec.distance_band;
            let in_band = |p: &BimanualAction| (lo..=hi).contains(&ee_distance(p));
            let grasped = poses.iter().position(|p| p.left.gripper >= 0.5);
            let release = grasped.and_then(|g| poses[g..].iter().position(|p| p.left.gripper < 0.5).map(|r| g + r));
            let handed = release.is_some_and(|r| {
                poses[r - 1].right.gripper >= 0.5 && in_band(&poses[r - 1]) && in_band(&poses[r])
            });
            handed && grip(last, false, true)
        }
    };
    match (held, at_goal(last), task_ok) {
        (true, _, true) => Verdict::Success,
        (false, true, true) => Verdict::Late,
        _ => Verdict::Miss,
    }
}

/// Episode seed for episode `k` of task `task_index` under `master`.
pub fn episode_seed(master: u64, task_index: usize, episode: usize) -> u64 {
    derive_seed(master, &[0xe915, task_index as u64, episode as u64])
}
