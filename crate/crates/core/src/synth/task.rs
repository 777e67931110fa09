use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::SeededRng;

/// Proprioception width: `(x, y, theta, gripper)`.
pub const ACTION_DIM: usize = 4;
/// `[x, y, theta, g, obj_x, obj_y, obj_angle, goal_dx, goal_dy]`.
pub const STATE_DIM: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    PushPlate,
    PickPlace,
    Reorient,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PushPlate => "push_plate",
            TaskKind::PickPlace => "pick_place",
            TaskKind::Reorient => "reorient",
        }
    }
}

/// Axis-aligned box in workspace units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range2 {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Range2 {
    pub fn sample(&self, rng: &mut SeededRng) -> [f64; 2] {
        [
            rng.uniform_range(self.x[0], self.x[1]),
            rng.uniform_range(self.y[0], self.y[1]),
        ]
    }

    fn inside_unit(&self, margin: f64) -> bool {
        let ok = |r: [f64; 2]| r[0] <= r[1] && r[0] - margin >= 0.0 && r[1] + margin <= 1.0;
        ok(self.x) && ok(self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotLimits {
    /// Max end-effector displacement per step.
    pub v_max: f64,
    /// Max |theta| (radians) when the gripper closes.
    pub theta_max: f64,
    /// Minimum number of steps between gripper toggles.
    pub gripper_latency: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub limits: RobotLimits,
    /// Range of goal-region centers.
    pub goal_center: Range2,
    pub goal_radius: f64,
    pub ee_start: Range2,
    pub object_start: Range2,
    /// Initial object orientation range (radians).
    pub object_angle: [f64; 2],
    /// Max distance between end effector and contact point for a grasp.
    pub grasp_radius: f64,
    /// Push contact sits this far behind the object, away from the goal.
    pub push_offset: f64,
    /// Required |object angle| at release (reorient only).
    pub upright_tol: f64,
    pub episode_cap: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        let limits = RobotLimits {
            v_max: 0.1,
            theta_max: 0.5,
            gripper_latency: 2,
        };
        let base = TaskSpec {
            kind,
            limits,
            goal_center: Range2 {
                x: [0.15, 0.85],
                y: [0.75, 0.88],
            },
            goal_radius: 0.12,
            ee_start: Range2 {
                x: [0.1, 0.9],
                y: [0.05, 0.2],
            },
            object_start: Range2 {
                x: [0.15, 0.85],
                y: [0.38, 0.6],
            },
            object_angle: [0.0, 0.0],
            grasp_radius: 0.1,
            push_offset: 0.0,
            upright_tol: 0.3,
            episode_cap: 60,
        };
        match kind {
            TaskKind::PickPlace => base,
            TaskKind::PushPlate => TaskSpec {
                push_offset: 0.05,
                object_start: Range2 {
                    x: [0.2, 0.8],
                    y: [0.4, 0.55],
                },
                ..base
            },
            TaskKind::Reorient => TaskSpec {
                object_angle: [1.3, 1.8],
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.limits;
        if !(l.v_max > 0.0) {
            return Err(Error::Config(format!("v_max must be > 0, got {}", l.v_max)));
        }
        if !(l.theta_max > 0.0 && l.theta_max < std::f64::consts::PI) {
            return Err(Error::Config(format!(
                "theta_max must be in (0, pi), got {}",
                l.theta_max
            )));
        }
        if !(self.goal_radius > 0.0) || !self.goal_center.inside_unit(self.goal_radius) {
            return Err(Error::Config("goal region must lie inside the unit square".into()));
        }
        if !self.ee_start.inside_unit(0.0) || !self.object_start.inside_unit(0.0) {
            return Err(Error::Config("start ranges must lie inside the unit square".into()));
        }
        if self.episode_cap == 0 || !(self.grasp_radius > 0.0) {
            return Err(Error::Config("episode cap and grasp radius must be positive".into()));
        }
        Ok(())
    }
}
