//! Planar two-link arms: forward kinematics, seeded analytic IK, and the
//! 7-dimensional arm action layout.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Reachability slack on the workspace annulus.
pub const REACH_TOLERANCE: f64 = 1e-9;

pub const ACTION_DIM: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmGeometry {
    pub base: [f64; 2],
    pub link_lengths: [f64; 2],
}

impl ArmGeometry {
    pub fn new(base: [f64; 2], l1: f64, l2: f64) -> Result<Self> {
        if !(l1 > 0.0 && l2 > 0.0) || !l1.is_finite() || !l2.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "link lengths must be positive, got ({l1}, {l2})"
            )));
        }
        Ok(Self {
            base,
            link_lengths: [l1, l2],
        })
    }

    /// Default left arm: base (-0.6, 0), both links 0.5 m.
    pub fn default_left() -> Self {
        Self {
            base: [-0.6, 0.0],
            link_lengths: [0.5, 0.5],
        }
    }

    /// Default right arm: base (+0.6, 0), both links 0.5 m.
    pub fn default_right() -> Self {
        Self {
            base: [0.6, 0.0],
            link_lengths: [0.5, 0.5],
        }
    }

    pub fn inner_radius(&self) -> f64 {
        (self.link_lengths[0] - self.link_lengths[1]).abs()
    }

    pub fn outer_radius(&self) -> f64 {
        self.link_lengths[0] + self.link_lengths[1]
    }

    pub fn distance_from_base(&self, target: [f64; 2]) -> f64 {
        (target[0] - self.base[0]).hypot(target[1] - self.base[1])
    }

    pub fn reachable(&self, target: [f64; 2]) -> bool {
        let d = self.distance_from_base(target);
        d >= self.inner_radius() - REACH_TOLERANCE && d <= self.outer_radius() + REACH_TOLERANCE
    }

    /// Closest point of the workspace annulus to `target`.
    pub fn project_to_workspace(&self, target: [f64; 2]) -> [f64; 2] {
        let d = self.distance_from_base(target);
        let clamped = d.clamp(self.inner_radius(), self.outer_radius());
        if d == clamped {
            return target;
        }
        let (ux, uy) = if d > 0.0 {
            ((target[0] - self.base[0]) / d, (target[1] - self.base[1]) / d)
        } else {
            (1.0, 0.0)
        };
        [self.base[0] + clamped * ux, self.base[1] + clamped * uy]
    }
}

/// Joint angles, kept in `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub angles: [f64; 2],
}

impl JointConfig {
    pub fn new(theta1: f64, theta2: f64) -> Self {
        Self {
            angles: [wrap_angle(theta1), wrap_angle(theta2)],
        }
    }

    /// Euclidean norm of the wrapped per-joint differences.
    pub fn distance(&self, other: &JointConfig) -> f64 {
        let d = self.wrapped_difference(other);
        d[0].hypot(d[1])
    }

    pub fn wrapped_difference(&self, other: &JointConfig) -> [f64; 2] {
        [
            wrap_angle(self.angles[0] - other.angles[0]),
            wrap_angle(self.angles[1] - other.angles[1]),
        ]
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    } else if t <= -PI {
        t += 2.0 * PI;
    }
    t
}

/// End-effector pose plus gripper: position (m), axis-angle orientation (rad),
/// gripper opening. Planar tasks keep `position[2] == 0` and use only
/// `orientation[0]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ArmAction {
    pub position: [f64; 3],
    pub orientation: [f64; 3],
    pub gripper: f64,
}

impl ArmAction {
    pub fn planar(x: f64, y: f64, yaw: f64, gripper: f64) -> Self {
        Self {
            position: [x, y, 0.0],
            orientation: [yaw, 0.0, 0.0],
            gripper,
        }
    }

    pub fn to_array(&self) -> [f64; ACTION_DIM] {
        let [x, y, z] = self.position;
        let [r0, r1, r2] = self.orientation;
        [x, y, z, r0, r1, r2, self.gripper]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        crate::error::check_dim("arm action", ACTION_DIM, v.len())?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("arm action"));
        }
        Ok(Self {
            position: [v[0], v[1], v[2]],
            orientation: [v[3], v[4], v[5]],
            gripper: v[6],
        })
    }

    pub fn planar_position(&self) -> [f64; 2] {
        [self.position[0], self.position[1]]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// The position sub-vector of an action.
pub fn pos_extract(a: &ArmAction) -> [f64; 3] {
    a.position
}

pub fn forward_kin(geom: &ArmGeometry, j: &JointConfig) -> [f64; 2] {
    let [l1, l2] = geom.link_lengths;
    let [t1, t2] = j.angles;
    [
        geom.base[0] + l1 * t1.cos() + l2 * (t1 + t2).cos(),
        geom.base[1] + l1 * t1.sin() + l2 * (t1 + t2).sin(),
    ]
}

/// Jacobian of the end-effector position with respect to the joint angles,
/// row-major `[[dx/dθ1, dx/dθ2], [dy/dθ1, dy/dθ2]]`.
pub fn fk_jacobian(geom: &ArmGeometry, j: &JointConfig) -> [[f64; 2]; 2] {
    let [l1, l2] = geom.link_lengths;
    let [t1, t2] = j.angles;
    let (s1, c1) = t1.sin_cos();
    let (s12, c12) = (t1 + t2).sin_cos();
    [
        [-l1 * s1 - l2 * s12, -l2 * s12],
        [l1 * c1 + l2 * c12, l2 * c12],
    ]
}

/// Both analytic solutions for a reachable target, elbow angle `+acos` first.
pub fn ik_branches(geom: &ArmGeometry, target: [f64; 2]) -> Result<[JointConfig; 2]> {
    let d = geom.distance_from_base(target);
    if !geom.reachable(target) {
        let clamp_distance = if d > geom.outer_radius() {
            d - geom.outer_radius()
        } else {
            geom.inner_radius() - d
        };
        return Err(Error::Unreachable {
            distance: d,
            inner: geom.inner_radius(),
            outer: geom.outer_radius(),
            clamp_distance,
        });
    }
    let [l1, l2] = geom.link_lengths;
    let x = target[0] - geom.base[0];
    let y = target[1] - geom.base[1];
    let cos_elbow = ((x * x + y * y - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let elbow = cos_elbow.acos();
    let solve = |t2: f64| {
        let t1 = y.atan2(x) - (l2 * t2.sin()).atan2(l1 + l2 * t2.cos());
        JointConfig::new(t1, t2)
    };
    Ok([solve(elbow), solve(-elbow)])
}

/// Analytic IK returning the elbow branch nearest (in wrapped angle distance)
/// to `seed`. Ties keep the `+acos` branch.
pub fn inverse_kin(geom: &ArmGeometry, target: [f64; 2], seed: &JointConfig) -> Result<JointConfig> {
    let [a, b] = ik_branches(geom, target)?;
    Ok(if b.distance(seed) < a.distance(seed) { b } else { a })
}
