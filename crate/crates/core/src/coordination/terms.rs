use super::PoseHistory;
use crate::composition::{ArmPair, BimanualAction};
use crate::kinematics::{fk_jacobian, inverse_kin, ArmGeometry, JointConfig};
use crate::numerics::norm;
use crate::Result;

/// Below this speed the synchronization direction term is switched off.
const DIRECTION_CUTOFF: f64 = 1e-9;
/// Speeds below this scale the direction term down linearly.
const DIRECTION_GATE: f64 = 1e-6;
/// `|sin θ2|` below this counts as a straight or folded elbow.
const SINGULAR_ELBOW: f64 = 1e-9;

/// `Σ_i ‖Δⁿ a^i‖²`, the squared `n`-th backward difference with
/// `n = past.len()` (`past` newest first), and its gradient in `a`.
/// Repeated differencing keeps the value exactly zero on constant histories.
pub fn temporal_term(a: &ArmPair<Vec<f64>>, past: &[&ArmPair<Vec<f64>>]) -> (f64, ArmPair<Vec<f64>>) {
    let arm = |pick: fn(&ArmPair<Vec<f64>>) -> &Vec<f64>| {
        let mut seq: Vec<Vec<f64>> = std::iter::once(pick(a).clone())
            .chain(past.iter().map(|p| pick(p).clone()))
            .collect();
        while seq.len() > 1 {
            seq = seq
                .windows(2)
                .map(|w| w[0].iter().zip(&w[1]).map(|(x, y)| x - y).collect())
                .collect();
        }
        let diff = &seq[0];
        let value: f64 = diff.iter().map(|d| d * d).sum();
        (value, diff.iter().map(|d| 2.0 * d).collect::<Vec<_>>())
    };
    let (vl, gl) = arm(|p| &p.left);
    let (vr, gr) = arm(|p| &p.right);
    (vl + vr, ArmPair::new(gl, gr))
}

fn gate(n: f64) -> (f64, f64) {
    if n < DIRECTION_GATE {
        (n / DIRECTION_GATE, 1.0 / DIRECTION_GATE)
    } else {
        (1.0, 0.0)
    }
}

/// `(‖v^L‖ - ‖v^R‖)² + γ ‖v̂^L - v̂^R‖²` with `v^i = a^i - a_{t-1}^i` and
/// the direction gate `γ`, plus its gradient in `a`.
pub fn sync_term(a: &ArmPair<Vec<f64>>, prev: &ArmPair<Vec<f64>>) -> (f64, ArmPair<Vec<f64>>) {
    let vl: Vec<f64> = a.left.iter().zip(&prev.left).map(|(x, p)| x - p).collect();
    let vr: Vec<f64> = a.right.iter().zip(&prev.right).map(|(x, p)| x - p).collect();
    let (nl, nr) = (norm(&vl), norm(&vr));
    let unit = |v: &[f64], n: f64| -> Vec<f64> {
        if n > 0.0 {
            v.iter().map(|x| x / n).collect()
        } else {
            vec![0.0; v.len()]
        }
    };
    let (ul, ur) = (unit(&vl, nl), unit(&vr, nr));

    let dm = nl - nr;
    let mut value = dm * dm;
    let mut gl: Vec<f64> = ul.iter().map(|u| 2.0 * dm * u).collect();
    let mut gr: Vec<f64> = ur.iter().map(|u| -2.0 * dm * u).collect();

    if nl >= DIRECTION_CUTOFF && nr >= DIRECTION_CUTOFF {
        let cos: f64 = ul.iter().zip(&ur).map(|(x, y)| x * y).sum();
        let dir: f64 = ul.iter().zip(&ur).map(|(x, y)| (x - y) * (x - y)).sum();
        let (gate_l, dgate_l) = gate(nl);
        let (gate_r, dgate_r) = gate(nr);
        let g = gate_l * gate_r;
        value += g * dir;
        for k in 0..gl.len() {
            let d_dir_l = 2.0 / nl * (ul[k] * cos - ur[k]);
            gl[k] += g * d_dir_l + dir * gate_r * dgate_l * ul[k];
        }
        for k in 0..gr.len() {
            let d_dir_r = 2.0 / nr * (ur[k] * cos - ul[k]);
            gr[k] += g * d_dir_r + dir * gate_l * dgate_r * ur[k];
        }
    }
    (value, ArmPair::new(gl, gr))
}

/// `max(0, d_safe - ‖p^L - p^R‖)²` and its gradient in the two positions.
/// Coincident points are pushed apart along the x axis.
pub fn ee_term(pl: [f64; 3], pr: [f64; 3], d_safe: f64) -> (f64, ArmPair<[f64; 3]>) {
    let diff = [pl[0] - pr[0], pl[1] - pr[1], pl[2] - pr[2]];
    let d = norm(&diff);
    let h = (d_safe - d).max(0.0);
    if h == 0.0 {
        return (0.0, ArmPair::new([0.0; 3], [0.0; 3]));
    }
    let dir = if d > 0.0 { diff.map(|x| x / d) } else { [1.0, 0.0, 0.0] };
    let gl = dir.map(|u| -2.0 * h * u);
    (h * h, ArmPair::new(gl, gl.map(|g| -g)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointTerm {
    pub value: f64,
    pub joints: ArmPair<JointConfig>,
    /// Gradient with respect to each arm's planar target.
    pub grad: ArmPair<[f64; 2]>,
    pub flagged: bool,
}

struct SolvedArm {
    joints: JointConfig,
    /// Inverse-transpose Jacobian, absent when the gradient must be dropped.
    inv_t: Option<[[f64; 2]; 2]>,
}

fn solve_arm(geom: &ArmGeometry, target: [f64; 2], seed: &JointConfig) -> Result<SolvedArm> {
    let (target, projected) = if geom.reachable(target) {
        (target, false)
    } else {
        (geom.project_to_workspace(target), true)
    };
    let joints = inverse_kin(geom, target, seed)?;
    let j = fk_jacobian(geom, &joints);
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    let inv_t = if projected || joints.angles[1].sin().abs() < SINGULAR_ELBOW {
        None
    } else {
        Some([[j[1][1] / det, -j[1][0] / det], [-j[0][1] / det, j[0][0] / det]])
    };
    Ok(SolvedArm { joints, inv_t })
}

/// Joint-space hinge `max(0, d_safe_joint - ‖j^L - j^R‖)²` with
/// `j^i = IK(target^i, seed^i)`. Unreachable targets are projected onto the
/// workspace; those, and singular elbows, get zero gradient and set `flagged`.
pub fn joint_term(
    geoms: &ArmPair<ArmGeometry>,
    targets: ArmPair<[f64; 2]>,
    seeds: &ArmPair<JointConfig>,
    d_safe_joint: f64,
) -> Result<JointTerm> {
    let l = solve_arm(&geoms.left, targets.left, &seeds.left)?;
    let r = solve_arm(&geoms.right, targets.right, &seeds.right)?;
    let flagged = l.inv_t.is_none() || r.inv_t.is_none();
    let joints = ArmPair::new(l.joints, r.joints);
    let delta = l.joints.wrapped_difference(&r.joints);
    let d = delta[0].hypot(delta[1]);
    let h = (d_safe_joint - d).max(0.0);
    let mut grad = ArmPair::new([0.0; 2], [0.0; 2]);
    if h > 0.0 {
        let dir = if d > 0.0 { [delta[0] / d, delta[1] / d] } else { [1.0, 0.0] };
        let gj_l = dir.map(|u| -2.0 * h * u);
        let through = |inv_t: &[[f64; 2]; 2], g: [f64; 2]| {
            [inv_t[0][0] * g[0] + inv_t[0][1] * g[1], inv_t[1][0] * g[0] + inv_t[1][1] * g[1]]
        };
        if let Some(m) = &l.inv_t {
            grad.left = through(m, gj_l);
        }
        if let Some(m) = &r.inv_t {
            grad.right = through(m, gj_l.map(|g| -g));
        }
    }
    Ok(JointTerm { value: h * h, joints, grad, flagged })
}

fn raw(a: &BimanualAction) -> ArmPair<Vec<f64>> {
    ArmPair::new(a.left.to_array().to_vec(), a.right.to_array().to_vec())
}

fn raw_history(h: &PoseHistory) -> [ArmPair<Vec<f64>>; 3] {
    std::array::from_fn(|k| raw(h.previous(k + 1)))
}

/// `Σ_i ‖a^i - a_{t-1}^i‖²` over the raw 7-dim actions.
pub fn e_vel(a: &BimanualAction, h: &PoseHistory) -> f64 {
    let p = raw_history(h);
    temporal_term(&raw(a), &[&p[0]]).0
}

/// `Σ_i ‖a^i - 2a_{t-1}^i + a_{t-2}^i‖²`.
pub fn e_accel(a: &BimanualAction, h: &PoseHistory) -> f64 {
    let p = raw_history(h);
    temporal_term(&raw(a), &[&p[0], &p[1]]).0
}

/// `Σ_i ‖a^i - 3a_{t-1}^i + 3a_{t-2}^i - a_{t-3}^i‖²`.
pub fn e_jerk(a: &BimanualAction, h: &PoseHistory) -> f64 {
    let p = raw_history(h);
    temporal_term(&raw(a), &[&p[0], &p[1], &p[2]]).0
}

pub fn e_sync(a: &BimanualAction, h: &PoseHistory) -> f64 {
    sync_term(&raw(a), &raw(h.previous(1))).0
}

pub fn e_ee(a: &BimanualAction, d_safe: f64) -> f64 {
    ee_term(a.left.position, a.right.position, d_safe).0
}

pub fn e_joint(
    a: &BimanualAction,
    h: &PoseHistory,
    geoms: &ArmPair<ArmGeometry>,
    d_safe_joint: f64,
) -> Result<JointTerm> {
    joint_term(
        geoms,
        ArmPair::new(a.left.planar_position(), a.right.planar_position()),
        h.joints(),
        d_safe_joint,
    )
}
